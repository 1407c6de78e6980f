"""Exception types shared across the toolkit."""


class VoxsslError(Exception):
    """Base class for all toolkit errors."""


# volume / dataset
class AllBackground(VoxsslError):
    """No voxel exceeds the foreground threshold."""


class EmptyDataset(VoxsslError):
    """Dataset root contains no readable volumes."""


# grids / lattices
class VolumeTooSmall(VoxsslError):
    """Volume extents cannot accommodate the requested grid or lattice."""


class LatticeTooSmall(VoxsslError):
    """Patch lattice has no valid anchor/target configuration."""


class TooManyNegatives(VoxsslError):
    """More negatives requested than available lattice positions."""


# permutations
class LengthMismatch(VoxsslError):
    """Sequences have different lengths."""


class InfeasibleRequest(VoxsslError):
    """Requested more permutations than exist."""


class NotABijection(VoxsslError):
    """Sequence is not a permutation of 0..m-1."""


class GridMismatch(VoxsslError):
    """Permutation set size does not match the grid cell count."""


# rotations / transforms
class DimensionMismatch(VoxsslError):
    """Operation is undefined for the volume's spatial rank."""


class NotNormalized(VoxsslError):
    """Input values fall outside [0, 1] beyond tolerance."""


# task builders
class EvenGridNoCenter(VoxsslError):
    """Relative-location grids need an odd cell count per axis."""


class BatchTooSmall(VoxsslError):
    """Triplet construction needs at least one valid negative sample."""


# losses
class EmptyNegatives(VoxsslError):
    """Contrastive loss needs at least one negative."""


class LabelOutOfRange(VoxsslError):
    """Class label outside [0, K)."""


# metrics
class ShapeMismatch(VoxsslError):
    """Mask shapes differ."""


class DegenerateMarginals(VoxsslError, Warning):
    """Rating marginals admit no chance disagreement (warned, not raised)."""


# models / checkpoints
class ShapeNotDivisible(VoxsslError):
    """Input spatial shape is not divisible by the encoder's reduction factor."""


class EmptySequence(VoxsslError):
    """Context network needs a non-empty embedding sequence."""


class NotAMultiple(VoxsslError):
    """New channel count must be a positive multiple of the old one."""


class IncompatibleCheckpoint(VoxsslError):
    """Checkpoint spec fingerprint does not match the target model."""


# synthetic data
class SpecInfeasible(VoxsslError):
    """Synthetic spec cannot be satisfied (e.g. tumor larger than organ)."""


# training
class TaskConfigMismatch(VoxsslError):
    """Training config fails validation before any compute starts."""


# cli
class RunDirCollision(VoxsslError):
    """Run directory already exists; refuse to overwrite without --force."""
