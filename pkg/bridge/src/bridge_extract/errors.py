class BridgeError(Exception):
    """Base class for extraction failures."""


class ModelContractError(BridgeError):
    """Encoder produced features of an unexpected width."""


class ImageReadError(BridgeError):
    """A slice image could not be decoded."""
