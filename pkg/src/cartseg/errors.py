class CartsegError(ValueError):
    """Error carrying a stable machine-readable ``code`` (e.g. ``"roi-out-of-bounds"``)."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)
