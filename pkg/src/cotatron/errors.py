class ValidationError(ValueError):
    """Input violates a documented precondition."""


class SpeakerLookupError(KeyError):
    """A speaker id is not part of the trained speaker table."""

    def __init__(self, speaker):
        super().__init__(speaker)
        self.speaker = speaker

    def __str__(self):
        return f"unknown speaker id: {self.speaker!r}"


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step, batch_ids, dump_path=None):
        msg = f"non-finite loss at step {step}; batch ids {list(batch_ids)}"
        if dump_path:
            msg += f"; diagnostics written to {dump_path}"
        super().__init__(msg)
        self.step = step
        self.batch_ids = list(batch_ids)
        self.dump_path = dump_path
