"""Rolling-shutter bundle adjustment for radiance fields from unordered images."""

from .camera import Intrinsics, Ray, RsFrame, cone_sphere_radius, pixel_ray, row_pose, rs_project
from .field import Aabb, FieldSample, RadianceField
from .lie import Pose, Sim3, Twist, se3_exp, se3_log, skew, so3_exp, so3_log, transform_point
from .renderer import RenderConfig, composite, render_image, sample_ray

__all__ = [
    "Aabb", "FieldSample", "Intrinsics", "Pose", "RadianceField", "Ray",
    "RenderConfig", "RsFrame", "Sim3", "Twist", "composite",
    "cone_sphere_radius", "pixel_ray", "render_image", "row_pose",
    "rs_project", "sample_ray", "se3_exp", "se3_log", "skew", "so3_exp",
    "so3_log", "transform_point",
]

__version__ = "0.1.0"
