"""Desk-scale laboratory for immunizing conditional diffusion models against
malicious fine-tuning, on synthetic 2-D concept data."""

from .analysis import TaylorProbe, grad_check, grad_check_custom, taylor_residual, taylor_scaling
from .attacks import (AdapterParams, AttackConfig, adapter_params, attack_full,
                      attack_lowrank, finetune_benign, init_adapter)
from .concepts import (Concept, ConceptDataset, Sample, draw_concept_points,
                       family_moments, load_dataset, make_concept_set, save_dataset,
                       split_arrays, split_view)
from .denoiser import (ActivationTrace, Arch, DenoiserParams, add_concept_token,
                       forward, gradient, init_denoiser, load_checkpoint,
                       param_count, psi_count, save_checkpoint)
from .diffusion import (DiffusionBatch, NoiseSchedule, build_schedule,
                        default_schedule, make_diffusion_batch, p_sample_loop, q_sample)
from .errors import NumericalError, SeparabilityError, ValidationError
from .immunize import (GiftConfig, ImmunizationRun, fit_denoiser, immunize,
                       immunize_naive, inner_step, outer_step)
from .losses import (LossValue, draw_noise_targets, loss_immunize, loss_max,
                     loss_noise, loss_prior, loss_value_and_grad)
from .metrics import (MetricsReport, ProbeClassifier, emit_report, eval_batch,
                      heldout_denoise_loss, histogram_mi, load_report,
                      median_bandwidth, mi_proxy, mmd, probe_accuracy,
                      probe_predict, train_probe)

__version__ = "0.1.0"
