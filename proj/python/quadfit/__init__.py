"""Quadruped shape and pose fitting on a procedural toy animal."""

from ._quadfit import (
    BreedSpec,
    FitResult,
    FitState,
    FlowPrior,
    ModelBundle,
    Observation2D,
    Priors,
    QuadfitError,
    SynthInstance,
    aligned_v2v,
    build_toy_model,
    cluster_quality,
    content_hash,
    default_fit_config,
    fit,
    gen_breeds,
    gen_dataset,
    iou,
    load_model,
    load_priors,
    pck,
    pose_state,
    procrustes_align,
    sample_gait_poses,
    save_model,
    save_priors,
    torso_length,
    train_flow,
)

__all__ = [name for name in dir() if not name.startswith("_")]
