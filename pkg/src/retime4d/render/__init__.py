from .rasterize import rasterize
from .renderer import (
    FlowDir,
    GradientBuffer,
    Group,
    GroupKind,
    GroupRender,
    RenderOutput,
    RenderRequest,
    group_members,
    project_gaussian,
    project_points,
    render,
    render_backward,
    render_flow,
    render_group_with_flow,
)
from .sh import eval_sh, rgb_to_sh, sh_to_rgb
