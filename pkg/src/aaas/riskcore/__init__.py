"""Aggregate risk analysis over year event tables and event loss tables."""

from .blobs import (
    decode_elts,
    decode_layer,
    decode_tables,
    decode_yet,
    encode_elts,
    encode_layer,
    encode_tables,
    encode_yet,
    risk_kernel,
    view_yet,
)
from .engine import (
    STEP_TRIALS,
    EventSource,
    LayerPlan,
    ThreadLanes,
    analyze,
    apply_terms,
    compute_layer,
    event_loss,
    lane_blocks,
    lookup_loss,
    trial_loss,
    ylt_digest,
)
from .metrics import pml, tvar
from .model import (
    ELTerms,
    EmptyTable,
    EventLossTable,
    EventOccurrence,
    IndexOutOfCatalog,
    InvalidAlpha,
    InvalidReturnPeriod,
    InvalidTables,
    Layer,
    LayerTerms,
    MalformedBlob,
    Portfolio,
    Program,
    RangeOutOfBounds,
    RiskError,
    Trial,
    YearEventTable,
)

KERNEL_NAME = "aggregate_risk_v1"
