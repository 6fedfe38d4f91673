from enum import IntEnum, StrEnum


class Metric(StrEnum):
    EUCLIDEAN = "euclidean"
    ANGULAR = "angular"


class ElementKind(StrEnum):
    F32 = "f32"
    U8 = "u8"
    I32 = "i32"


class ArrayKind(IntEnum):
    """Serialized arrays of a sub-index image, in on-image order."""

    LEVELS = 0
    OFFSETS = 1
    NEIGHBORS = 2
    VECTORS = 3
    LABELS = 4


class InsertStatus(StrEnum):
    COMMITTED = "COMMITTED"
    BUFFERED = "BUFFERED"
    REBUILD_REQUIRED = "REBUILD_REQUIRED"
    FAILED = "FAILED"


class EpochPhase(StrEnum):
    STEADY = "STEADY"
    REBUILDING = "REBUILDING"
    SWITCHING = "SWITCHING"
