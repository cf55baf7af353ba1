"""IPFIX (RFC 7011) wire codec, exporter and collector."""
from flowkit.ipfix.codec import (
    CANONICAL_TEMPLATES,
    IPV4_TEMPLATE,
    IPV6_TEMPLATE,
    MAX_MESSAGE_SIZE,
    DecodeResult,
    EmptyBatch,
    FieldSpec,
    IpfixError,
    MalformedMessage,
    MessageTooLarge,
    RecordTemplateMismatch,
    TemplateCache,
    TemplateRecord,
    decode_message,
    encode_message,
    encode_template_message,
    records_per_message,
    template_for,
)

__all__ = [
    "CANONICAL_TEMPLATES", "IPV4_TEMPLATE", "IPV6_TEMPLATE", "MAX_MESSAGE_SIZE",
    "DecodeResult", "EmptyBatch", "FieldSpec", "IpfixError", "MalformedMessage",
    "MessageTooLarge", "RecordTemplateMismatch", "TemplateCache", "TemplateRecord",
    "decode_message", "encode_message", "encode_template_message", "records_per_message",
    "template_for",
]
