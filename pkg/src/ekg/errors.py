"""Exception hierarchy. Every class carries a stable ``code`` (used on the
wire) and a distinct process ``exit_code`` (used by the CLI)."""

from __future__ import annotations


class EKGError(Exception):
    code = "error"
    exit_code = 1


class UsageError(EKGError):
    code = "usage"
    exit_code = 2


class ConfigError(EKGError):
    code = "config"
    exit_code = 3


class BindError(EKGError):
    code = "bind"
    exit_code = 4


class InvalidVector(EKGError):
    code = "invalid_vector"
    exit_code = 10


class DimMismatch(EKGError):
    code = "dim_mismatch"
    exit_code = 11


class InvalidDistribution(EKGError):
    code = "invalid_distribution"
    exit_code = 12


class InvalidTemperature(EKGError):
    code = "invalid_temperature"
    exit_code = 13


class InvalidConfig(EKGError):
    code = "invalid_config"
    exit_code = 14


class InvalidSegments(EKGError):
    code = "invalid_segments"
    exit_code = 15


class FormatError(EKGError):
    code = "format"
    exit_code = 16


class CorruptStore(EKGError):
    code = "corrupt_store"
    exit_code = 17


class GraphInvariantError(EKGError):
    code = "graph_invariant"
    exit_code = 18


class DuplicateClip(EKGError):
    code = "duplicate_clip"
    exit_code = 19


class MissingFeature(EKGError):
    code = "missing_feature"
    exit_code = 20


class AnnotationError(EKGError):
    code = "annotation"
    exit_code = 21

    def __init__(self, attempts: int, message: str = ""):
        self.attempts = attempts
        super().__init__(message or f"annotation failed after {attempts} attempts")


class ProtocolError(EKGError):
    code = "protocol"
    exit_code = 22


class AnnotationRejected(EKGError):
    code = "rejected"
    exit_code = 23

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


class UnknownNode(EKGError):
    code = "unknown_node"
    exit_code = 24


class EmptySubgraph(EKGError):
    code = "empty_subgraph"
    exit_code = 25


class EmptyHits(EKGError):
    code = "empty_hits"
    exit_code = 26


class EmptyKnowledge(EKGError):
    code = "empty_knowledge"
    exit_code = 27


class InvalidShape(EKGError):
    code = "invalid_shape"
    exit_code = 28


class EmptyResults(EKGError):
    code = "empty_results"
    exit_code = 29
