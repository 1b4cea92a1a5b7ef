"""Exception hierarchy shared by all modules."""


class PlaceRecError(Exception):
    pass


# geometry
class EmptyCloud(PlaceRecError):
    pass


class OutOfRange(PlaceRecError):
    pass


class DegenerateResult(PlaceRecError):
    pass


# sparse engine
class ShapeMismatch(PlaceRecError):
    pass


class StrideViolation(PlaceRecError):
    pass


class ChannelMismatch(PlaceRecError):
    pass


class StrideMismatch(PlaceRecError):
    pass


class DegenerateBatch(PlaceRecError):
    pass


class EmptyTensor(PlaceRecError):
    pass


class IncompleteTape(PlaceRecError):
    pass


# network
class InvalidConfig(PlaceRecError):
    pass


class ConfigHashMismatch(PlaceRecError):
    pass


class CorruptFile(PlaceRecError):
    pass


# losses
class NoPositives(PlaceRecError):
    pass


class NoValidQueries(PlaceRecError):
    pass


class NoValidAnchors(PlaceRecError):
    pass


# trainer
class InsufficientData(PlaceRecError):
    pass


# retrieval
class EmptyDatabase(PlaceRecError):
    pass


class EmptyQueries(PlaceRecError):
    pass


class UnknownTraversal(PlaceRecError):
    pass


class SingleTraversal(PlaceRecError):
    pass


# datasets
class CorruptManifest(PlaceRecError):
    pass


class MissingCloudFile(PlaceRecError):
    pass
