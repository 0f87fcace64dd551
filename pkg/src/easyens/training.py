"""Training, evaluation, multi-seed trials, and the equivalence certifier.

A trial is fully determined by (seed, config, dataset): batch order,
augmentation draws, and parameter initialization all derive from spawned
generator streams, so identical inputs reproduce identical results bit for
bit. Trials are independent and may run on worker threads (capped by the
``EASYENS_THREADS`` environment variable); results aggregate in submission
order.
"""

from __future__ import annotations

import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import WindowedDataset
from .ensemble import (ArchitectureSpec, ModelBundle, build, merge_outputs,
                       transplant_me_to_ee)
from .layers import cross_entropy
from .tensor import Tensor
from .variation import Pipeline, compose


# -- optimizer ---------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0

    @classmethod
    def initial(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState, lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> list[np.ndarray]:
    """One bias-corrected Adam update; mutates ``state``, returns new params."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ValueError("params and grads length mismatch")
    b1, b2 = betas
    state.step_count += 1
    t = state.step_count
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param/grad shape mismatch: {p.shape} vs {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        m_hat = state.m[i] / (1 - b1 ** t)
        v_hat = state.v[i] / (1 - b2 ** t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


class Adam:
    """Adam over a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState.initial([p.data for p in self.params])

    def step(self) -> None:
        grads = []
        for p in self.params:
            grads.append(p.grad if p.grad is not None else np.zeros_like(p.data))
        new = adam_step([p.data for p in self.params], grads, self.state,
                        self.lr, self.betas, self.eps)
        for p, value in zip(self.params, new):
            p.data = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- configuration -------------------------------------------------------------------


PRESETS = {
    "desk": dict(epochs=30, batch_size=128, trials=10),
    "paper": dict(epochs=500, batch_size=1000, trials=100),
}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    augmentation: list = field(default_factory=list)  # pipeline descriptors
    ensemble: ArchitectureSpec | None = None
    convergence_floor: float = 0.5
    dtype: str = "float32"

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("invalid training hyperparameters")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")


@dataclass
class TrialResult:
    trial_id: int
    seed: int
    mode: str
    n_ensemble: int
    param_count: int
    epochs: int
    epoch_losses: list[float]
    test_accuracy: float
    converged: bool
    seconds: float

    def to_row(self) -> dict:
        return {"trial_id": self.trial_id, "mode": self.mode, "N": self.n_ensemble,
                "params": self.param_count, "epochs": self.epochs,
                "test_accuracy": self.test_accuracy, "converged": self.converged,
                "seconds": round(self.seconds, 3)}


def _resolve_pipeline(config: TrainConfig, bundle: ModelBundle,
                      dataset: WindowedDataset) -> Pipeline | None:
    descriptors = list(config.augmentation)
    if not descriptors:
        if bundle.input_repeat == 1:
            return None
        descriptors = [{"repeat": bundle.input_repeat}]
    pipeline = compose(descriptors, layout=dataset.layout)
    out_channels = pipeline.output_channels(dataset.num_channels)
    if out_channels != bundle.input_channels:
        raise ValueError(f"pipeline produces {out_channels} channels but the model "
                         f"expects {bundle.input_channels}")
    return pipeline


# -- training -----------------------------------------------------------------------


def train(bundle: ModelBundle, dataset: WindowedDataset, config: TrainConfig, *,
          test_dataset: WindowedDataset | None = None, trial_id: int = 0) -> TrialResult:
    """Train a bundle with Adam on categorical cross-entropy.

    BL/ME/EE optimize one loss on the (merged) logits, one backward pass per
    batch. PE trains each model on its own loss over the same batch order.
    A non-finite loss aborts the trial and marks it non-converged, as does a
    final accuracy at or below the convergence floor.
    """
    config.validate()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    dtype = np.dtype(config.dtype)
    start = time.perf_counter()
    root = np.random.SeedSequence(config.seed)
    order_rng, aug_rng = (np.random.default_rng(s) for s in root.spawn(2))

    pipeline = _resolve_pipeline(config, bundle, dataset)
    lam_hint = pipeline.implied_lambda() if pipeline is not None else None
    if (bundle.mode == "EE" and lam_hint is not None
            and not math.isclose(bundle.merge_weight, lam_hint, rel_tol=1e-9)):
        warnings.warn(f"bundle merge weight {bundle.merge_weight} does not match the "
                      f"pipeline-implied {lam_hint}", stacklevel=2)

    if bundle.mode == "PE":
        optimizers = [Adam(m.parameters(), lr=config.learning_rate)
                      for m in bundle.models]
    else:
        optimizers = [Adam(bundle.parameters(), lr=config.learning_rate)]

    bundle.train()
    n = len(dataset)
    epoch_losses: list[float] = []
    aborted = False
    for _ in range(config.epochs):
        perm = order_rng.permutation(n)
        total_loss = 0.0
        total_weight = 0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            xb = dataset.windows[idx]
            yb = dataset.labels[idx]
            if pipeline is not None:
                xb, mask = pipeline.apply_train(xb, aug_rng)
            else:
                mask = None
            x = Tensor(xb.astype(dtype, copy=False))

            if bundle.mode == "PE":
                batch_loss = 0.0
                for model, opt in zip(bundle.models, optimizers):
                    loss = cross_entropy(model.forward(x), yb)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    batch_loss += loss.item()
                batch_loss /= len(bundle.models)
            else:
                logits = bundle.forward(x, group_mask=mask)
                loss = cross_entropy(logits, yb)
                optimizers[0].zero_grad()
                loss.backward()
                optimizers[0].step()
                batch_loss = loss.item()

            if not math.isfinite(batch_loss):
                aborted = True
                break
            total_loss += batch_loss * len(idx)
            total_weight += len(idx)
        if aborted:
            break
        epoch_losses.append(total_loss / total_weight)

    eval_ds = test_dataset if test_dataset is not None else dataset
    if aborted:
        accuracy = 0.0
    else:
        accuracy = evaluate_accuracy(bundle, eval_ds, pipeline=pipeline)
    converged = (not aborted) and accuracy > config.convergence_floor
    spec = bundle.spec
    return TrialResult(trial_id=trial_id, seed=config.seed,
                       mode=bundle.ablation or bundle.mode,
                       n_ensemble=spec.n_ensemble,
                       param_count=bundle.param_count(), epochs=len(epoch_losses),
                       epoch_losses=epoch_losses, test_accuracy=accuracy,
                       converged=converged, seconds=time.perf_counter() - start)


def evaluate_accuracy(bundle, dataset: WindowedDataset, *,
                      pipeline: Pipeline | None = None, batch_size: int = 256,
                      dtype=None) -> float:
    """Fraction of argmax-correct windows.

    The deterministic form of the pipeline shapes the input (repeats,
    modality grouping); with no pipeline, the raw input is repeated to the
    bundle's expected channel count. Scaling all logits by any positive
    constant cannot change the result.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    bundle.eval()
    if dtype is None:
        models = getattr(bundle, "models", None)
        dtype = models[0].dtype if models else np.float64
    repeat = getattr(bundle, "input_repeat", 1)
    correct = 0
    for lo in range(0, len(dataset), batch_size):
        xb = dataset.windows[lo:lo + batch_size]
        if pipeline is not None:
            xb = pipeline.apply_eval(xb)
        elif repeat > 1:
            xb = np.concatenate([xb] * repeat, axis=1)
        logits = bundle.forward(Tensor(xb.astype(dtype, copy=False)))
        pred = logits.data.argmax(axis=1)
        correct += int((pred == dataset.labels[lo:lo + batch_size]).sum())
    return correct / len(dataset)


# -- multi-seed trials -----------------------------------------------------------------


def _worker_count() -> int:
    value = os.environ.get("EASYENS_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def summarize_trials(results: Sequence[TrialResult]) -> dict:
    """Mean/median/95% CI over converged trials; non-converged are excluded
    from the statistics but reported in the count."""
    accuracies = np.array([r.test_accuracy for r in results if r.converged])
    summary = {
        "n_trials": len(results),
        "n_excluded": sum(1 for r in results if not r.converged),
    }
    if accuracies.size == 0:
        summary.update({"failed": True, "mean": None, "median": None,
                        "ci95_low": None, "ci95_high": None})
        return summary
    mean = float(accuracies.mean())
    half = 0.0
    if accuracies.size > 1:
        half = 1.96 * float(accuracies.std(ddof=1)) / math.sqrt(accuracies.size)
    summary.update({"failed": False, "mean": mean,
                    "median": float(np.median(accuracies)),
                    "ci95_low": mean - half, "ci95_high": mean + half})
    return summary


def run_trials(config: TrainConfig, num_trials: int, dataset: WindowedDataset,
               test_dataset: WindowedDataset, *,
               builder: Callable[[int], ModelBundle] | None = None
               ) -> tuple[list[TrialResult], dict]:
    """Repeat training under seeds spawned from the master seed.

    Trials differ only by seed. With ``EASYENS_THREADS`` set above 1 they run
    on worker threads; each trial is self-contained, so the results do not
    depend on scheduling.
    """
    if num_trials < 1:
        raise ValueError("num_trials must be >= 1")
    config.validate()
    if builder is None:
        if config.ensemble is None:
            raise ValueError("config.ensemble is required without a custom builder")
        spec = config.ensemble

        def builder(seed: int) -> ModelBundle:
            return build(spec, seed, dtype=np.dtype(config.dtype))

    seeds = [int(s.generate_state(1)[0]) for s in
             np.random.SeedSequence(config.seed).spawn(num_trials)]

    def run_one(i: int) -> TrialResult:
        trial_cfg = replace(config, seed=seeds[i])
        bundle = builder(seeds[i])
        return train(bundle, dataset, trial_cfg, test_dataset=test_dataset,
                     trial_id=i)

    workers = _worker_count()
    if workers == 1:
        results = [run_one(i) for i in range(num_trials)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, range(num_trials)))
    return results, summarize_trials(results)


# -- equivalence certification ------------------------------------------------------------


_TAP_FAMILIES = ("conv", "norm", "pool", "gap", "logits")


def _family_of(name: str) -> str | None:
    for fam in _TAP_FAMILIES:
        if fam in name:
            return fam
    return None


@dataclass
class EquivalenceReport:
    n_ensemble: int
    trials: int
    tolerance: float
    grad_tolerance: float
    family_max: dict
    logit_max: float
    grad_max: float

    @property
    def passed(self) -> bool:
        return self.logit_max <= self.tolerance and self.grad_max <= self.grad_tolerance \
            and all(v <= self.tolerance for v in self.family_max.values())

    def to_dict(self) -> dict:
        return {"n": self.n_ensemble, "trials": self.trials,
                "tolerance": self.tolerance, "grad_tolerance": self.grad_tolerance,
                "family_max": self.family_max, "logit_max": self.logit_max,
                "grad_max": self.grad_max, "passed": self.passed}

    def format_table(self) -> str:
        lines = [f"{'layer family':<14} {'max abs deviation':>20}"]
        for fam, dev in sorted(self.family_max.items()):
            lines.append(f"{fam:<14} {dev:>20.3e}")
        lines.append(f"{'logits':<14} {self.logit_max:>20.3e}")
        lines.append(f"{'gradients':<14} {self.grad_max:>20.3e}")
        lines.append(f"result: {'PASS' if self.passed else 'FAIL'} "
                     f"(forward tol {self.tolerance:g}, grad tol {self.grad_tolerance:g})")
        return "\n".join(lines)


def equivalence_check(spec: ArchitectureSpec, n: int, trials: int = 5,
                      tolerance: float = 1e-10, *, grad_tolerance: float = 1e-8,
                      batch: int = 4, seed: int = 0) -> EquivalenceReport:
    """Certify numerically that the grouped model reproduces the merged ensemble.

    Builds an ME bundle and an EE skeleton from the same blocks, packs the ME
    weights into the EE model, and compares forward activations (per layer
    family) and parameter gradients on random inputs, ``trials`` times with
    fresh seeds. Batch normalization is refused: batch statistics couple
    instances across the whole batch, so grouped and per-path models are not
    numerically interchangeable under it.
    """
    if any(b.norm == "batch" for b in spec.blocks):
        raise ValueError("equivalence certification requires layer or group "
                         "normalization; batch statistics make grouped and "
                         "per-path models diverge")
    if any(b.n_groups is not None and b.n_groups != n for b in spec.blocks):
        raise ValueError("equivalence certification requires a uniform group count")
    me_spec = spec.replace(ensemble_mode="ME", n_ensemble=n, lambda_weight=None)
    ee_spec = spec.replace(ensemble_mode="EE", n_ensemble=n, lambda_weight=None)

    family_max = {fam: 0.0 for fam in _TAP_FAMILIES if fam != "logits"}
    logit_max = 0.0
    grad_max = 0.0
    root = np.random.SeedSequence(seed)
    for trial_seq in root.spawn(trials):
        trial_rng = np.random.default_rng(trial_seq)
        build_seed = int(trial_seq.generate_state(1)[0])
        me = build(me_spec, build_seed, dtype=np.float64)
        ee = build(ee_spec, build_seed, dtype=np.float64)
        transplant_me_to_ee(me, ee)

        xb = trial_rng.uniform(-1.0, 1.0, size=(batch, spec.input_channels,
                                                spec.input_width))
        labels = trial_rng.integers(0, spec.num_classes, size=batch)

        ee_taps: dict = {}
        x_rep = Tensor(np.concatenate([xb] * n, axis=1))
        ee_logits = ee.forward(x_rep, taps=ee_taps)

        path_taps: list[dict] = [{} for _ in range(n)]
        x_raw = Tensor(xb)
        path_logits = [me.models[g].forward(x_raw, taps=path_taps[g])
                       for g in range(n)]
        me_logits = merge_outputs(path_logits, me.merge_weight)

        for name, ee_val in ee_taps.items():
            fam = _family_of(name)
            if fam is None or name == "logits" or name not in path_taps[0]:
                continue
            stacked = np.concatenate([pt[name] for pt in path_taps], axis=1)
            family_max[fam] = max(family_max[fam],
                                  float(np.max(np.abs(ee_val - stacked))))
        logit_max = max(logit_max,
                        float(np.max(np.abs(ee_logits.data - me_logits.data))))

        cross_entropy(ee_logits, labels).backward()
        cross_entropy(me_logits, labels).backward()
        ee_net = ee.models[0]
        for bi, block in enumerate(ee_net.blocks):
            for ui, (conv, _) in enumerate(block.units):
                cout_g = conv.out_channels // n
                for g, path in enumerate(me.models):
                    pconv = path.blocks[bi].units[ui][0]
                    dev_w = np.abs(conv.weight.grad[g * cout_g:(g + 1) * cout_g]
                                   - pconv.weight.grad).max()
                    dev_b = np.abs(conv.bias.grad[g * cout_g:(g + 1) * cout_g]
                                   - pconv.bias.grad).max()
                    grad_max = max(grad_max, float(dev_w), float(dev_b))
        k = ee_net.num_classes
        for g, path in enumerate(me.models):
            dev_w = np.abs(ee_net.head.weight.grad[g * k:(g + 1) * k, :, 0]
                           - path.head.weight.grad).max()
            dev_b = np.abs(ee_net.head.bias.grad[g * k:(g + 1) * k]
                           - path.head.bias.grad).max()
            grad_max = max(grad_max, float(dev_w), float(dev_b))

    return EquivalenceReport(n_ensemble=n, trials=trials, tolerance=tolerance,
                             grad_tolerance=grad_tolerance, family_max=family_max,
                             logit_max=logit_max, grad_max=grad_max)
