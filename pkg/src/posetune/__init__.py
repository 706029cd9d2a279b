"""posetune: one-shot test-time tuning of a toy latent diffusion backbone
for pose-guided sprite transfer, with identity- and style-consistency
injection, pose control residuals, and a control-free refiner."""

from .adapters import (
    AdapterCheckpoint,
    LoraParam,
    ScaleMap,
    WeightOffset,
    apply_weight_offset,
    attach_lora,
    default_scale_map,
    effective_weight,
    load_checkpoint,
    remove_weight_offset,
    save_checkpoint,
)
from .audit import AuditLog
from .backbone import (
    ConditioningBundle,
    ControlResiduals,
    LatentCodec,
    ModelConfig,
    ModelContext,
    NoiseSchedule,
    ddim_sample,
    list_blocks,
    register_hook,
    unet_forward,
)
from .control import ControlBranch, ControlSource, PoseSpec, control_forward, pretrain_control, render_pose
from .oneshot import TuneConfig, build_trainable_set, eval_reconstruction, reconstruction_loss, tune
from .pipeline import PipelineConfig, RefineResult, TransferResult, composite, refine, transfer
from .vcm import (
    FaceConditioning,
    FaceProjector,
    IdentityStrategy,
    InjectionConfig,
    StyleEncoder,
    TokenSequence,
    embed_description,
    replace_value_token,
    wrap_face_token,
)

__version__ = "0.1.0"
