"""parcelport-lab: a configurable asynchronous parcel-transport runtime."""

from .completion import (
    CompletionDescriptor,
    OpKind,
    QueueKind,
    Synchronizer,
    SynchronizerPool,
    make_queue,
)
from .parcel import (
    HEADER_BOUND,
    HeaderFrame,
    NzcLayout,
    Parcel,
    build_parcel,
    decode_header,
    encode_header,
    messages_on_wire,
    parcel_digest,
)
from .parcelport import (
    MATRIX_PRESETS,
    Parcelport,
    VariantConfig,
    merge_parcels,
    preset,
    unmerge_parcels,
)
from .progress import LockStrategy, Mode, ProgressConfig, ProgressEngine
from .transport import Device, LoopbackFabric, device_create

__version__ = "0.1.0"
