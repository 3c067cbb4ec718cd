"""Desk-scale laboratory for quantization-triggered behavior backdoors.

Train small models that classify correctly at full precision yet emit an
attacker-chosen class once a specific weight-quantization operation is
applied; evaluate attack success and cross-quantizer transfer; scan
checkpoints for suspicious prediction divergence between the plain and
quantized views.
"""

from .errors import (ConfigError, DataFormatError, NumericError, QbfError,
                     ShapeError, StateError)
from .tensor import Tensor, backward, no_grad
from .quantizers import (QuantizerSpec, dorefa_weight_quantize, fake_quantize,
                         quantize, round_half_away, ste_backward,
                         ternary_quantize, uniform_symmetric_quantize)
from .models import (PLAIN, QUANTIZED, ModelArch, ParameterStore,
                     attach_quantizer, forward, init_model, list_parameters,
                     load_checkpoint, save_checkpoint)
from .data import (Dataset, batches, load_cifar10_dataset, load_idx_dataset,
                   parse_cifar10, parse_idx, serialize_cifar10,
                   split_train_val, synthetic_blobs)
from .training import (AdamState, LrSchedule, TrainConfig, TrainHistory,
                       adam_update, lr_schedule_tick, overall_loss, qba_loss,
                       train_backdoor, train_step, train_vanilla)
from .evaluation import (CrossTriggerMatrix, EvalReport, acc_target, accuracy,
                         asr, asr_from_predictions, cross_trigger_matrix,
                         divergence_scan, evaluate, export_features)

__version__ = "0.1.0"
