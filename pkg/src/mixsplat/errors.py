"""Exception types raised by the mixsplat pipeline."""


class MixsplatError(Exception):
    """Base class for all mixsplat errors."""


class SceneError(MixsplatError):
    """Scene construction or mutation violated an invariant."""


class DegenerateTriangleError(SceneError):
    """A triangle collapsed below the minimum area threshold."""

    def __init__(self, tri: int, frame=None, area=None):
        self.tri = tri
        self.frame = frame
        self.area = area
        where = f"triangle {tri}"
        if frame is not None:
            where += f" at frame {frame}"
        msg = f"degenerate {where}"
        if area is not None:
            msg += f" (area={area:.3e})"
        super().__init__(msg)


class DuplicateChildError(SceneError):
    """spawn_children was asked to add a child to a surfel that has one."""

    def __init__(self, surfel: int):
        self.surfel = surfel
        super().__init__(f"surfel {surfel} already has a child")


class RenderError(MixsplatError):
    """Rasterization failed (NaN contribution, key overflow, ...)."""


class MissingCacheError(RenderError):
    """backward() called without a matching forward cache."""


class DatasetError(MixsplatError):
    """Dataset manifest or referenced files are invalid."""


class FormatError(MixsplatError):
    """A binary or text artifact did not match its declared format."""


class ConfigError(MixsplatError):
    """Training configuration failed validation."""
