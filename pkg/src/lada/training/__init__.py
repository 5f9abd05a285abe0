from lada.training.batching import Batch, BatchComposer, batch_split, compose_batch
from lada.training.config import LossWeights, TrainConfig, dump_config, load_config, parse_config_text
from lada.training.ema import ema_update
from lada.training.losses import (
    LossBreakdown, adversarial_losses, consistency_losses, detection_loss, mic_loss, total_loss,
)
from lada.training.loop import (
    TrainResult, evaluate_model, images_to_tensor, predict, record_targets, to_detections, train_stage1,
    train_stage2,
)
from lada.training.masking import BlockMask, apply_mask, generate_mask
from lada.training.pseudo import PseudoLabelSet, filter_pseudo_labels
from lada.training.schedule import lr_schedule
