"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: data/format problems exit with 3,
degenerate math with 4.
"""


class OVFieldError(Exception):
    exit_code = 3


class SpecError(OVFieldError):
    """Scene description is malformed or describes an impossible object."""


class PlacementError(SpecError):
    """Two objects claim the same voxels."""


class EmptyViewError(OVFieldError):
    """Camera frustum does not intersect the scene bounds."""


class FormatError(OVFieldError):
    """Binary or text container cannot be parsed."""


class ConsistencyError(OVFieldError):
    """Shapes or dimensions of otherwise valid inputs disagree."""


class ConfigError(OVFieldError):
    """Invalid training / query configuration."""


class DegenerateFusionError(OVFieldError):
    exit_code = 4
