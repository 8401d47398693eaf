"""Python surface of the camokit core: colorspace, mask algebra, noise
schedules, detection metrics, SSIM and the synthetic corpus generator."""

from camokit._core import (  # noqa: F401
    ValidationError,
    NotReadyError,
    NumericalError,
    rgb_to_lab,
    lab_to_rgb,
    normalized_l,
    normalized_ab,
    dilate,
    annulus,
    downsample_mask,
    binarize,
    composite,
    forward_noise,
    one_step_estimate,
    nms,
    ap50,
    f1_optimal_threshold,
    attack_success_rate,
    ssim,
    nlm_denoise,
    bilateral_filter,
    scene_types,
    gen_scene,
    gen_concept_exemplar,
)
