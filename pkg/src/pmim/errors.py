"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, malformed input file, or violated precondition.

    The CLI maps this to exit code 2.
    """


class NumericsError(RuntimeError):
    """Non-finite values or a failed numerical check.

    The CLI maps this to exit code 3.
    """
