"""Exception hierarchy shared by all modules."""


class RenderabilityError(Exception):
    """Root of every error raised by this package."""


class LatticeError(RenderabilityError, ValueError):
    pass


class StatsError(RenderabilityError, ValueError):
    pass


class MapError(RenderabilityError):
    pass


class UnreachableError(MapError):
    """Query position is not a free cell, or no free path exists."""


class SaturatedPoseError(RenderabilityError):
    """Nothing left to gain from a pose (empty G and V)."""


class PlannerStallError(RenderabilityError):
    pass


class SceneError(RenderabilityError):
    pass


class ConfigError(RenderabilityError, ValueError):
    pass
