"""Exception hierarchy shared by every module."""


class SpectronError(Exception):
    pass


class ShapeError(SpectronError, ValueError):
    pass


class NonFiniteError(SpectronError, ValueError):
    pass


class ConvergenceError(SpectronError, RuntimeError):
    pass


class RankDeficientError(SpectronError, ValueError):
    pass


class FitError(SpectronError, RuntimeError):
    pass


class ConfigError(SpectronError, ValueError):
    pass


class DataError(SpectronError, ValueError):
    pass
