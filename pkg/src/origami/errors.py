"""Exception hierarchy shared by all modules."""


class OrigamiError(Exception):
    pass


class ParameterError(OrigamiError, ValueError):
    """Input outside an operation's domain (bad sizes, empty input, malformed context)."""


class InvalidWitnessError(OrigamiError):
    pass


class CannotSelfUpdateError(OrigamiError):
    pass


class ElementIsMemberError(OrigamiError):
    pass


class ProtocolError(OrigamiError):
    """A party attempted something the channel protocol forbids."""


class MembershipError(ProtocolError):
    pass


class ScenarioError(OrigamiError):
    """A scenario file failed schema validation."""

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [])
