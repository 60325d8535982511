"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it so that
failures can be parsed by scripts.
"""


class MsgazeError(Exception):
    category = "runtime"


class ConfigError(MsgazeError, ValueError):
    category = "config"


class ContractError(MsgazeError, ValueError):
    category = "contract"


class RenderError(MsgazeError):
    category = "render"


class ArchitectureError(MsgazeError, ValueError):
    category = "architecture"


class TrainingError(MsgazeError):
    category = "training"


class ProtocolError(MsgazeError):
    category = "protocol"


class DataIOError(MsgazeError, OSError):
    category = "io"


class OutputExistsError(MsgazeError):
    category = "exists"
