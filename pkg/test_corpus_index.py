"""Tests for ingestion, chunking and the index cache."""

import random

import pytest

from app.models import IndexParams, SourceFile
from app.services.corpus_index import (
    IngestWarning,
    RepoIndexBuilder,
    build_index,
    chunk_file,
    ingest_repo,
    load_index,
    save_index,
    tokenize,
)
from app.utils.exceptions import IngestError
from conftest import make_task


def _lines(n: int):
    return [f"value_{i} = {i}" for i in range(1, n + 1)]


def test_tokenize():
    assert tokenize("def foo(bar):") == {"def", "foo", "bar"}
    assert tokenize("") == frozenset()
    assert tokenize("Foo foo FOO") == {"foo"}


def test_tokenize_distributes_over_whitespace_join():
    rng = random.Random(5)
    alphabet = "abcXYZ019_ .(),:=\t\u00e9"
    for _ in range(2000):
        a = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 15)))
        b = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 15)))
        assert tokenize(a + " " + b) == tokenize(a) | tokenize(b), (a, b)


def test_ingest_filters_extensions(make_repo):
    root = make_repo({"a.py": "\n".join(_lines(10)) + "\n", "README.md": "# readme\n"})
    files = ingest_repo(str(root))
    assert [f.path for f in files] == ["a.py"]
    assert len(files[0].lines) == 10


def test_ingest_truncates_task_file(make_repo):
    root = make_repo({"t.py": "\n".join(_lines(10)) + "\n"})
    task = make_task(_lines(6), "value_7 = 7")
    files = ingest_repo(str(root), task=task)
    assert files[0].lines == _lines(6)


def test_ingest_skips_undecodable_files(make_repo):
    root = make_repo({
        "a.py": "x = 1\n",
        "b.py": b"y = \xff\xfe\n",
        "pkg/c.py": "z = 3\n",
    })
    warnings = []
    files = ingest_repo(str(root), warnings=warnings)
    assert [f.path for f in files] == ["a.py", "pkg/c.py"]
    assert len(warnings) == 1
    assert isinstance(warnings[0], IngestWarning)
    assert warnings[0].path == "b.py"


def test_ingest_missing_root(tmp_path):
    with pytest.raises(IngestError):
        ingest_repo(str(tmp_path / "missing"))


def test_ingest_keeps_crlf_lines_without_carriage_return(make_repo):
    root = make_repo({"a.py": "x = 1\r\ny = 2\r\n"})
    assert ingest_repo(str(root))[0].lines == ["x = 1", "y = 2"]


def test_chunk_file_windows_cover_every_line():
    f = SourceFile(path="a.py", lines=_lines(25))
    chunks = chunk_file(f, window_size=10, stride=5)
    assert [(c.start_line, c.end_line) for c in chunks] == [
        (1, 10), (6, 15), (11, 20), (16, 25), (21, 25),
    ]
    covered = {n for c in chunks for n in range(c.start_line, c.end_line + 1)}
    assert covered == set(range(1, 26))
    for c in chunks:
        assert c.line_count <= 10
        assert c.token_set == tokenize(c.text)


def test_chunk_file_short_and_empty_files():
    assert [(c.start_line, c.end_line) for c in chunk_file(SourceFile(path="a.py", lines=_lines(3)), 20, 10)] == [(1, 3)]
    assert chunk_file(SourceFile(path="a.py", lines=[]), 20, 10) == []


def test_chunk_file_rejects_bad_geometry():
    with pytest.raises(ValueError):
        chunk_file(SourceFile(path="a.py", lines=_lines(3)), 5, 6)


def test_index_params_validation():
    with pytest.raises(ValueError):
        IndexParams(window_size=10, stride=0)
    with pytest.raises(ValueError):
        IndexParams(window_size=4, stride=5)


def test_build_index_order_and_fingerprint():
    b = SourceFile(path="b.py", lines=_lines(5))
    a = SourceFile(path="a.py", lines=_lines(5))
    params = IndexParams(window_size=2, stride=2)
    index = build_index([b, a], params)
    keys = [(c.file_path, c.start_line) for c in index.chunks]
    assert keys == sorted(keys)
    assert build_index([a, b], params).source_fingerprint == index.source_fingerprint

    changed = SourceFile(path="a.py", lines=_lines(4))
    assert build_index([changed, b], params).source_fingerprint != index.source_fingerprint


def test_repo_index_builder_matches_build_index(make_repo):
    root = make_repo({
        "a.py": "\n".join(_lines(30)) + "\n",
        "t.py": "\n".join(_lines(12)) + "\n",
    })
    params = IndexParams(window_size=5, stride=3)
    task = make_task(_lines(7), "value_8 = 8")
    builder = RepoIndexBuilder(str(root), params)

    expected = build_index(ingest_repo(str(root), task=task), params)
    assert builder.build_for_task(task) == expected
    assert builder.build_for_task(None) == build_index(ingest_repo(str(root)), params)


def test_leakage_guard_hides_target_line(make_repo):
    lines = _lines(12)
    lines[7] = "secret_token_here = compute()"
    root = make_repo({"t.py": "\n".join(lines) + "\n"})
    task = make_task(lines[:7], lines[7])
    index = RepoIndexBuilder(str(root), IndexParams(window_size=4, stride=2)).build_for_task(task)
    assert all("secret_token_here" not in c.text for c in index.chunks)


def test_save_and_load_index(tmp_path):
    index = build_index([SourceFile(path="a.py", lines=_lines(9))], IndexParams(window_size=4, stride=2))
    path = tmp_path / "cache" / "index.jsonl"
    save_index(index, str(path))
    assert load_index(str(path)) == index


def test_save_index_is_byte_stable(tmp_path):
    files = [SourceFile(path="b.py", lines=_lines(7)), SourceFile(path="a.py", lines=_lines(12))]
    index = build_index(files, IndexParams(window_size=5, stride=3))
    first, second = tmp_path / "one.jsonl", tmp_path / "two.jsonl"
    save_index(index, str(first))
    save_index(build_index(list(reversed(files)), IndexParams(window_size=5, stride=3)), str(second))
    assert first.read_bytes() == second.read_bytes()
    save_index(load_index(str(first)), str(second))
    assert first.read_bytes() == second.read_bytes()
