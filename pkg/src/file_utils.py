import os
import tempfile
import logging

logger = logging.getLogger(__name__)


def atomic_write_bytes(path: str, payload: bytes) -> str:
    """Writes payload to a temporary file next to path, then renames it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp_', dir=directory)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.debug(f"[IO] Wrote {len(payload)} bytes to {path}")
    return path


def atomic_write_text(path: str, text: str) -> str:
    return atomic_write_bytes(path, text.encode('utf-8'))
