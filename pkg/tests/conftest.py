import pytest


@pytest.fixture
def write_config(tmp_path):
    """Write a flat key = value config (plus optional auxiliary files) and return its path."""

    def _write(body: str, name: str = "experiment.cfg", **aux_files: str) -> str:
        for filename, content in aux_files.items():
            (tmp_path / filename.replace("__", ".")).write_text(content, encoding="utf-8")
        path = tmp_path / name
        path.write_text(body, encoding="utf-8")
        return str(path)

    return _write
