"""flowkit: software flow metering, IPFIX export/collection and flow analysis."""

__version__ = "0.1.0"

#: On-disk flow store format version (see :mod:`flowkit.store`).
STORE_FORMAT_VERSION = 1
#: IPFIX protocol version emitted and accepted.
IPFIX_VERSION = 10

from flowkit.flow import EndReason, FlowKey, FlowRecord  # noqa: E402

__all__ = ["EndReason", "FlowKey", "FlowRecord", "__version__"]
