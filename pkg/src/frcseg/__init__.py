"""Semi-supervised medical image segmentation with a mean-teacher pair,
frequency-domain consistency and multi-granularity region similarity
consistency."""

from .backbone import (BackboneConfig, FreezePolicy, ModelOutputs, SegBackbone,
                       trainable_parameter_filter)
from .config import (DataConfig, OptimizerConfig, TrainConfig, architecture_hash,
                     desk_config, load_config, paper_config, profile_config,
                     save_config)
from .data import (SplitManifest, epoch_batches, load_batch, make_split,
                   scan_dataset, synth_dataset)
from .errors import ConfigError, DataError, FrcsegError, NumericError
from .frequency import (FemConfig, FrequencyEnhancer, FrequencyFeatures,
                        block_dct, dct_basis, split_low_high, zigzag_order)
from .losses import (LossReport, LossWeights, fdc_loss, lambda_schedule,
                     mrsc_loss, pixel_consistency_loss, supervised_loss,
                     total_loss)
from .mean_teacher import EmaTeacher
from .metrics import (MetricReport, MetricsLog, average_metrics_csvs,
                      compute_metrics)
from .model import SegModel
from .region import (RegionConfig, RegionProjector, multi_granularity_similarities,
                     project_regions, region_similarity)
from .trainer import (TrainResult, dump_feature_response, evaluate_checkpoint,
                      evaluate_model, train)

__version__ = "0.1.0"
