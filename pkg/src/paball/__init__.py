"""Point-cloud photoacoustic reconstruction with Gaussian-ball sources."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    ConfigError,
    FormatError,
    GeometryError,
    OptimizationError,
    PointCloud,
    ReconstructionError,
    RngSeed,
    SensorArray,
    SignalSet,
    SimulationError,
    SourceBall,
    TimeGrid,
    ValidationReport,
    VoxelGrid,
    seeded_uniform,
    validate_cloud,
)
from .geometry import (  # noqa: F401
    EnvelopeMesh,
    InwardOffset,
    build_envelope,
    generate_array,
    initialize_cloud,
    offset_inward,
    point_in_mesh,
)
from .radiator import (  # noqa: F401
    ForwardContext,
    ParamGradients,
    backward,
    downsample,
    loss,
    simulate_at_rate,
    simulate_signals,
)
from .optimizer import (  # noqa: F401
    DensityThresholds,
    FilterReport,
    IterationTrace,
    LearningRates,
    Level,
    Schedule,
    density_control,
    positivity_refine,
    run_hierarchical,
    step,
    zero_gradient_filter,
)
from .render import RenderSpec, max_amplitude_projection, slice_plane, voxelize  # noqa: F401
from .baseline import MetricReport, cnr, max_normalized, mse, psnr, ssim, ubp_reconstruct  # noqa: F401
from .phantom import PhantomSpec, generate_phantom, make_dataset  # noqa: F401
