"""Exception types shared across the pipeline."""


class FormatError(ValueError):
    """File is not a readable single-file NIfTI-1 volume."""


class UnsupportedShapeError(ValueError):
    """Volume on disk is not scalar 3D data."""


class ShapeError(ValueError):
    """Grids that must share dimensions do not."""


class BoundsError(ValueError):
    """Bounding box exceeds the grid it is applied to."""


class EmptyStructureError(ValueError):
    """Requested structure has no voxels in any label map."""


class DegenerateInputError(ValueError):
    """Input carries no usable information (empty histogram, empty stack)."""


class InsufficientPoolError(ValueError):
    """Fewer pool images than the requested similarity rank."""
