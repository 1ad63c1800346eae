"""Exception types shared across the package."""


class GlossCamError(Exception):
    pass


class DegenerateGradient(GlossCamError):
    """SDF gradient vanishes (|grad f| <= 1e-9), so no normal exists."""


class NearPlanar(GlossCamError):
    """Mean curvature too small for an osculating sphere; use the planar branch."""


class CornerMiss(GlossCamError):
    def __init__(self, corner: int):
        super().__init__(f"bounding ray {corner} misses the osculating sphere")
        self.corner = corner


class RaysParallel(GlossCamError):
    """Reflected rays are (numerically) parallel; the pencil has no focus."""


class NoHit(GlossCamError):
    pass


class OutsideVolume(GlossCamError):
    pass


class ConfigError(GlossCamError):
    """Invalid scene / fit configuration. ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class NonFiniteLoss(GlossCamError):
    def __init__(self, iteration: int, batch_id: int):
        super().__init__(f"non-finite loss at iteration {iteration} (batch {batch_id})")
        self.iteration = iteration
        self.batch_id = batch_id


class InsufficientBaseline(GlossCamError):
    pass


class DimensionMismatch(GlossCamError):
    pass


class MissingLayer(GlossCamError):
    pass


class CheckpointError(GlossCamError):
    pass


class SceneHashMismatch(GlossCamError):
    pass
