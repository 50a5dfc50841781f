"""Exception hierarchy.

Every exception carries a short machine-parsable ``category`` string which the
CLI prints on failure.
"""


class SuprError(Exception):
    category = "error"


class InvalidArgumentError(SuprError, ValueError):
    category = "invalid-argument"


class ScaleGuardError(InvalidArgumentError):
    category = "scale-guard"


class InvalidModelError(SuprError):
    category = "invalid-model"


class UnsupportedOperationError(SuprError):
    category = "unsupported-operation"


class InvalidPartError(SuprError):
    category = "invalid-part"


class ModelInconsistencyError(SuprError):
    category = "model-inconsistency"


class NumericalFailureError(SuprError):
    category = "numerical-failure"

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class ContainerError(SuprError):
    category = "container"


class ManifestError(ContainerError):
    category = "manifest"


class FormatVersionError(ContainerError):
    category = "version-mismatch"


class TruncatedContainerError(ContainerError):
    category = "truncated"


class ChecksumError(ContainerError):
    category = "checksum"


class MeshFormatError(SuprError):
    category = "mesh-format"

    def __init__(self, message, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.offset = offset
