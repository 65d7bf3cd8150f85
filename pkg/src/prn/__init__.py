"""Training 3D shape regressors from 2D tracks with a Procrustes-aligned low-rank loss.

The loss aligns each group of predicted shapes to its own mean by rotation,
penalises the nuclear norm of the aligned shapes, and back-propagates through
the alignment analytically.
"""

from .align import AlignmentState, check_transversality, gpa_align, to_aligned_matrix
from .geometry import center, kabsch_rotation, random_rotation
from .loss import (
    LossConfig,
    ObservationBatch,
    alignment_backward,
    assemble_jacobian_blocks,
    data_term,
    data_term_grad,
    nuclear_norm,
    nuclear_norm_subgrad,
    pr_loss_and_grad,
)

__all__ = [
    "AlignmentState", "check_transversality", "gpa_align", "to_aligned_matrix",
    "center", "kabsch_rotation", "random_rotation",
    "LossConfig", "ObservationBatch", "alignment_backward", "assemble_jacobian_blocks",
    "data_term", "data_term_grad", "nuclear_norm", "nuclear_norm_subgrad", "pr_loss_and_grad",
]
