"""Monte Carlo 6-DoF camera localization against volumetric radiance-field maps."""

from .camera import CameraIntrinsics, PixelSample, Ray, pixel_to_ray, sample_pixels
from .errors import (AngleNearPi, BadCount, BadSpec, ConfigError, FieldlocError,
                     NonConvergence, NonMonotonicTimestamps, OutOfBounds, ParseError,
                     TooShort)
from .fields import (AnalyticScene, Bounds, BoxPrimitive, RadianceField, Sphere,
                     VoxelField, bake_voxels, load_voxels, save_voxels, triad_scene)
from .filter import (AnnealConfig, AnnealState, FilterContext, InitMode, InitSpec,
                     Particle, ParticleSet, Stage, StepTrace, anneal, estimate_pose,
                     init_global, init_local, photometric_weight, position_spread,
                     predict, resample, step, update_weights)
from .motion import (OdometrySegment, TrajectorySample, constant_velocity_propagate,
                     dead_reckon, load_odometry, load_trajectory,
                     perturbed_gt_odometry, save_odometry, save_trajectory)
from .render import (RenderConfig, dequantize_image, quantize_image, render_image,
                     render_ray, sample_coarse, sample_fine)
from .se3 import (NoiseParams, Pose, Rotation, Twist, exp_map, log_map,
                  rotation_average, rotation_geodesic_deg, sample_noise)

__version__ = "0.1.0"
