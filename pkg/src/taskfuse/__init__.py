"""Multi-task self-supervised pretraining with weight-space task fusion.

Four pretext tasks share one convolutional encoder. Each epoch every task
trains its own clone; a temporal ensemble fuses the clones back into a single
encoder whose latent distribution is held near a prior by a pluggable
divergence penalty. The fused encoder transfers to a classifier via soft
targets or flow matrices and is scored by linear probes and clustering.
"""

from .archs import (AdapterNetwork, Encoder, EncoderConfig, TargetNetwork,
                    TaskHeader, make_header)
from .config import ExperimentConfig, load_config, save_config
from .divergences import (DivergenceKind, TransformFilterConfig, divergence,
                          divergence_kinds, normalize_features, prior_divergence,
                          uniform_prior)
from .evalsuite import (ClusterReport, cluster_metrics, dec_fit, dec_soft_assign,
                        dec_target_distribution, kmeans_init, linear_probe)
from .harness import (RunArtifacts, plot_impact, run_eval, run_pretrain,
                      run_transfer, seed_stream)
from .params import (LossLedger, LossRecord, ParameterSet, SnapshotMeta,
                     SnapshotRing, load_snapshot, save_snapshot)
from .pretext import (PermutationSet, PretextSample, build_permutation_set,
                      forward_task, make_pretext, task_loss, total_loss)
from .transfer import (FspMatrix, TransferConfig, distill_loss, fsp_matrix,
                       fsp_transfer_loss, soft_target_probs)
from .tte import (DeltaSet, EnsembleCoefficients, LayerPolicy, LossHistory,
                  default_coefficients, ensemble_step, impact_trace,
                  moving_average, select_tte_layers, task_gradient,
                  temporal_gradient, update_coefficients)

__version__ = "0.1.0"
