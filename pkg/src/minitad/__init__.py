"""minitad: modular temporal action detection at desk scale."""

from minitad.core import (
    ActionInstance,
    FeatureSequence,
    LabelSpace,
    ProposalSet,
    TimeInterval,
    VideoRecord,
    clamp_interval,
    diou_term,
    giou_term,
    tiou,
    tiou_matrix,
)

__version__ = "0.1.0"

__all__ = [
    "ActionInstance",
    "FeatureSequence",
    "LabelSpace",
    "ProposalSet",
    "TimeInterval",
    "VideoRecord",
    "clamp_interval",
    "diou_term",
    "giou_term",
    "tiou",
    "tiou_matrix",
    "__version__",
]
