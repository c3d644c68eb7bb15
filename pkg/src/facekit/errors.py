"""Exception hierarchy shared across the toolkit."""


class FacekitError(Exception):
    """Base class for all toolkit errors."""


class MeshError(FacekitError):
    """Malformed mesh data or an unsupported mesh file."""


class RegistrationError(FacekitError):
    """Alignment or non-rigid registration failure."""


class ModelError(FacekitError):
    """Tensor / bilinear model construction or usage error."""


class RenderError(FacekitError):
    """Rasterization error."""


class FitError(FacekitError):
    """Image fitting failure."""


class PipelineError(FacekitError):
    """CLI pipeline stage failure."""
