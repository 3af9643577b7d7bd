"""Supported language codes (ISO 639-1)."""

SUPPORTED_LANGUAGES: tuple[str, ...] = (
    "ar", "zh", "cs", "nl", "en", "fr", "de", "el", "he", "hi", "id", "it",
    "ja", "ko", "fa", "pl", "pt", "ro", "ru", "es", "tr", "uk", "vi",
)

SHARED_LANGUAGES: tuple[str, ...] = ("en", "es", "fr")


def check_language(code: str, allowed=SUPPORTED_LANGUAGES) -> str:
    if code not in allowed:
        raise ValueError(f"unsupported language {code!r}")
    return code
