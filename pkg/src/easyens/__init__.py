"""Grouped-layer deep ensembling for 1-D sensor time series.

A single grouped model (grouped convolutions, group normalization, a
grouped classification head, and a fixed merge weight) reproduces a merged
ensemble of independent encoders exactly; this package builds all four
styles (baseline, pure ensemble, merged ensemble, grouped ensemble) from
one architecture description, certifies the equivalence numerically, and
runs multi-seed training experiments on windowed sensor data.
"""

from .tensor import (Tensor, add, concat_channels, div, elementwise,
                     finite_difference_grad, mul, reshape, sub, sum_axis)
from .layers import (Conv1d, Dense, NormLayer, conv1d, cross_entropy, dense,
                     global_average_pool, max_pool, relu, softmax_temperature)
from .ensemble import (AblationCode, ArchitectureSpec, BlockSpec, ModelBundle,
                       build, build_ablation_variant, build_stepwise,
                       load_checkpoint, merge_outputs, parameter_count,
                       preset_spec, save_checkpoint, transplant_me_to_ee,
                       vgg_spec)
from .variation import (AugmentationSet, MaskTensor, ModalityLayout, Pipeline,
                        augment_an, compose, generate_mask, jitter, mask_mn,
                        modality_group, repeat_rn, rotation_augment, scale,
                        shift)
from .data import (RawRecording, SubjectSplit, WindowedDataset, load_csv,
                   load_datasets, make_synth_dataset, save_datasets,
                   sliding_window, standardize, subject_split, synth_generate,
                   trim_edges, windowize, write_csv)
from .training import (Adam, AdamState, EquivalenceReport, TrainConfig,
                       TrialResult, adam_step, equivalence_check,
                       evaluate_accuracy, run_trials, summarize_trials, train)
from .cli import cli_main

__version__ = "0.1.0"
