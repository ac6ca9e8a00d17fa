"""collagekit: layer-conditioned diffusion harmonization.

Compose a scene as RGBA layers with per-layer text, then generate globally
coherent images that keep each object where (and how) the layers say.
"""

from .attention import (
    AttentionBias,
    AttentionStrengths,
    biased_cross_attention,
    build_bias,
    install_hooks,
    schedule_weight,
)
from .autoparams import AutoParamBounds, auto_params
from .backend import (
    AttentionSite,
    BackendError,
    DiffusionBackend,
    MockBackend,
    MockControlNet,
    backend_from_config,
    mock_backend,
    register_backend,
)
from .control import apply_scalar_weight, apply_weights, build_weight_map, canny_condition
from .inversion import (
    InvertedToken,
    InversionConfig,
    build_inversion_target,
    inject_token,
    invert_layer,
    load_token,
    remove_token,
    save_token,
)
from .metrics import (
    ClipEmbedder,
    MockEmbedder,
    appearance_fidelity,
    export_rubric,
    masked_region,
    published_similarity_table,
    report,
    spatial_fidelity,
)
from .model import (
    Collage,
    CollageError,
    Layer,
    Placement,
    VisibilityMap,
    collage_equal,
    compute_visibility,
    flatten_composite,
    load_project,
    rasterize_layer,
    save_project,
    validate_collage,
)
from .noise import BlendMask, LatentState, NoiseImage, blend_mask, blended_step, build_noise_image
from .pipeline import (
    AblationFlags,
    GenerationConfig,
    GenerationResult,
    OccludedLayerError,
    generate_gallery,
    harmonize,
    refine_layer,
    sdedit_harmonize,
)
from .tokens import TokenRoleMap, classify_tokens

__version__ = "0.1.0"
