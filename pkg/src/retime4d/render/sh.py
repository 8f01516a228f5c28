"""Real spherical harmonics color evaluation (degrees 0-2)."""
import torch

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)


def rgb_to_sh(rgb):
    return (rgb - 0.5) / C0


def sh_to_rgb(sh0):
    return sh0 * C0 + 0.5


def eval_sh(sh: torch.Tensor, dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Color from SH coefficients [N, K, 3] along unit directions [N, 3].

    Follows the usual splatting convention: ``+0.5`` offset, clamped at zero.
    """
    out = C0 * sh[:, 0]
    if degree >= 1:
        x, y, z = (dirs[:, i : i + 1] for i in range(3))
        out = out - C1 * y * sh[:, 1] + C1 * z * sh[:, 2] - C1 * x * sh[:, 3]
        if degree >= 2:
            xx, yy, zz = x * x, y * y, z * z
            out = (
                out
                + C2[0] * x * y * sh[:, 4]
                + C2[1] * y * z * sh[:, 5]
                + C2[2] * (2 * zz - xx - yy) * sh[:, 6]
                + C2[3] * x * z * sh[:, 7]
                + C2[4] * (xx - yy) * sh[:, 8]
            )
    return torch.clamp_min(out + 0.5, 0.0)
