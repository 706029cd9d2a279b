from .config import AppConfig, EvalSettings, load_config
from .fixtures import (
    FixturePair,
    SpriteSpec,
    description_for,
    generate_sprite,
    make_control_dataset,
    make_fixture_pair,
    make_pose,
)
from .metrics import (
    PSNR_CAP_DB,
    feature_similarity,
    get_extractor,
    pair_metrics,
    psnr,
    register_extractor,
    ssim,
)
from .providers import (
    apply_mask,
    load_description,
    load_face_embedding,
    load_mask,
    save_face_embedding,
    toy_face_embed,
)
from .reporting import EvalReport, run_ablation

__all__ = [
    "AppConfig",
    "EvalReport",
    "EvalSettings",
    "FixturePair",
    "PSNR_CAP_DB",
    "SpriteSpec",
    "apply_mask",
    "description_for",
    "feature_similarity",
    "generate_sprite",
    "get_extractor",
    "load_config",
    "load_description",
    "load_face_embedding",
    "load_mask",
    "make_control_dataset",
    "make_fixture_pair",
    "make_pose",
    "pair_metrics",
    "psnr",
    "register_extractor",
    "run_ablation",
    "save_face_embedding",
    "ssim",
    "toy_face_embed",
]
