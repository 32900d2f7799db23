"""Exception hierarchy shared by every module.

Each class carries a short machine-readable ``code`` that the CLI prints as
the prefix of its one-line error message.
"""


class FlowdeskError(Exception):
    code = "E_GENERIC"


class ShapeError(FlowdeskError, ValueError):
    code = "E_SHAPE"

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericError(FlowdeskError, ArithmeticError):
    code = "E_NUMERIC"


class ContractError(FlowdeskError, ValueError):
    """A precondition of an operation was violated by the caller."""

    code = "E_CONTRACT"


class DomainError(ContractError):
    code = "E_DOMAIN"


class SingularityError(NumericError):
    code = "E_SINGULAR"


class ConvergenceError(NumericError):
    code = "E_CONVERGENCE"


class DegenerateReferenceError(NumericError):
    code = "E_DEGENERATE_REF"


class ConfigError(FlowdeskError, ValueError):
    code = "E_CONFIG"


class SchemaError(FlowdeskError, ValueError):
    """Malformed input file; ``path`` and ``line`` point at the offending row."""

    code = "E_SCHEMA"

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ProviderError(FlowdeskError, RuntimeError):
    code = "E_PROVIDER"
