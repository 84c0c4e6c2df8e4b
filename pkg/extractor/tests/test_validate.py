import struct

import numpy as np
import pytest

from embed_extract.extract import ExtractionJob, extract, validate

from conftest import SENTENCES


@pytest.fixture()
def emb_file(model_dir, corpus_file, tmp_path):
    out = tmp_path / "e.emb"
    extract(ExtractionJob(corpus=corpus_file, out=out, model=model_dir, batch_size=3))
    return out


def checks(report):
    return {c.name: c.ok for c in report.checks}


def test_fresh_file_passes(model_dir, corpus_file, emb_file):
    report = validate(emb_file, corpus_file, model=model_dir)
    assert report.ok
    assert checks(report) == {
        "structure": True,
        "sentence_count": True,
        "token_counts": True,
        "finite": True,
        "pooled_recompute": True,
    }


def test_recompute_any_sentence(model_dir, corpus_file, emb_file):
    for i in range(len(SENTENCES)):
        report = validate(emb_file, corpus_file, model=model_dir, sample_index=i)
        assert report.ok, report.as_dict()


def test_extra_corpus_sentence_fails_counts(model_dir, corpus_file, emb_file, tmp_path):
    longer = tmp_path / "longer.tokens"
    longer.write_text("\n".join(SENTENCES + ["one more line"]) + "\n", encoding="utf-8")
    report = validate(emb_file, longer, model=model_dir)
    assert not report.ok
    assert checks(report)["sentence_count"] is False
    assert "pooled_recompute" not in checks(report)


def test_changed_tokens_fail_token_counts(model_dir, corpus_file, emb_file, tmp_path):
    edited = SENTENCES.copy()
    edited[2] = edited[2] + " extra"
    other = tmp_path / "edited.tokens"
    other.write_text("\n".join(edited) + "\n", encoding="utf-8")
    report = validate(emb_file, other, model=model_dir)
    assert checks(report)["sentence_count"] is True
    assert checks(report)["token_counts"] is False
    assert "record 2" in next(c.detail for c in report.checks if c.name == "token_counts")


def test_truncated_file_fails_structure(model_dir, corpus_file, emb_file):
    blob = emb_file.read_bytes()
    emb_file.write_bytes(blob[: len(blob) // 2])
    report = validate(emb_file, corpus_file, model=model_dir)
    assert not report.ok
    assert [c.name for c in report.checks] == ["structure"]


def test_nan_fails_finite(model_dir, corpus_file, emb_file):
    blob = bytearray(emb_file.read_bytes())
    # first float of record 0 sits right after the 16-byte header + u32 count
    blob[20:24] = struct.pack("<f", float("nan"))
    emb_file.write_bytes(bytes(blob))
    report = validate(emb_file, corpus_file, model=model_dir)
    assert checks(report)["finite"] is False


def test_corrupted_values_fail_recompute(model_dir, corpus_file, emb_file):
    blob = bytearray(emb_file.read_bytes())
    (orig,) = struct.unpack_from("<f", blob, 20)
    struct.pack_into("<f", blob, 20, orig + 0.01)
    emb_file.write_bytes(bytes(blob))
    report = validate(emb_file, corpus_file, model=model_dir, sample_index=0)
    assert checks(report)["finite"] is True
    assert checks(report)["pooled_recompute"] is False


def test_sample_index_out_of_range(model_dir, corpus_file, emb_file):
    with pytest.raises(ValueError, match="out of range"):
        validate(emb_file, corpus_file, model=model_dir, sample_index=99)


def test_empty_pair_skips_recompute(model_dir, tmp_path):
    corpus = tmp_path / "empty.tokens"
    corpus.write_text("", encoding="utf-8")
    out = tmp_path / "empty.emb"
    extract(ExtractionJob(corpus=corpus, out=out, model=model_dir))
    report = validate(out, corpus, model=model_dir)
    assert report.ok
    assert "pooled_recompute" not in checks(report)
