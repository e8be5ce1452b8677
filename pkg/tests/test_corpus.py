import hashlib
import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import disc_scene
from semcs.config import resolve_config
from semcs.corpus import (
    CorpusSpec,
    JobManifest,
    StyleText,
    corpus_report,
    expand_grid,
    grid_size,
    job_seed,
    manifest_hash,
    read_manifest,
    run_jobs,
)
from semcs.errors import InputError
from semcs.evaluation import REPORT_SCHEMA
from semcs.imaging import save_image

TINY = {
    "backend": "seeded",
    "image_size": 48,
    "training.iterations": 2,
    "training.batch_size": 1,
    "training.n_perspective_augs": 1,
    "training.crop_size": 32,
}


def spec_for(n_images, n_texts, pairing="single_grid", root="out"):
    return CorpusSpec([f"imgs/c{i:02d}.png" for i in range(n_images)],
                      [StyleText(f"style {j}", "cat") for j in range(n_texts)], pairing, root)


@pytest.fixture
def tiny_config():
    return resolve_config(overrides=TINY)


@pytest.fixture
def images(tmp_path):
    paths = []
    for i in range(2):
        img, _ = disc_scene(48, seed=i)
        p = tmp_path / f"photo{i}.png"
        save_image(p, img)
        paths.append(str(p))
    return paths


# ---------------------------------------------------------------- grids

def test_single_grid_2900():
    assert len(expand_grid(spec_for(58, 50))) == 2900


def test_double_grid_25000():
    jobs = expand_grid(spec_for(10, 50, "double_grid"))
    assert len(jobs) == 25000
    assert len({j.job_id for j in jobs}) == 25000
    assert "style 3||style 3" in {j.prompt for j in jobs}


def test_one_by_one():
    jobs = expand_grid(spec_for(1, 1))
    assert len(jobs) == 1 and jobs[0].status == "pending"


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from(["single_grid", "double_grid"]))
def test_grid_cardinality_closed_form(n_img, n_txt, pairing):
    jobs = expand_grid(spec_for(n_img, n_txt, pairing))
    assert len(jobs) == grid_size(n_img, n_txt, pairing)
    assert len({j.job_id for j in jobs}) == len(jobs)


def test_expansion_deterministic_and_layout():
    a, b = expand_grid(spec_for(2, 3)), expand_grid(spec_for(2, 3))
    assert a == b
    for j in a:
        ph = hashlib.sha256(j.prompt.encode()).hexdigest()[:12]
        assert j.output_path.endswith(f"{j.content_id}/{ph}")
        assert j.seed == job_seed(j.job_id)


def test_duplicate_content_ids():
    with pytest.raises(InputError):
        CorpusSpec(["a/x.png", "b/x.jpg"], ["t"])


@pytest.mark.parametrize("texts", [["a", "a"], ["", "b"], ["a||b"], []])
def test_bad_texts(texts):
    with pytest.raises(InputError):
        CorpusSpec(["x.png"], texts)


def test_bad_pairing():
    with pytest.raises(InputError):
        CorpusSpec(["x.png"], ["t"], pairing="triple")


def test_spec_from_yaml(tmp_path):
    (tmp_path / "spec.yaml").write_text(
        "content_paths: [imgs/a.png, imgs/b.png]\n"
        "style_texts:\n  - {text: Desert Sand, category: texture}\n  - Snowy\n"
        "pairing: double_grid\noutput_root: runs\n")
    spec = CorpusSpec.from_file(tmp_path / "spec.yaml")
    assert spec.content_ids == ["a", "b"]
    assert spec.style_texts[0] == StyleText("Desert Sand", "texture")
    assert spec.output_root == str(tmp_path / "runs")
    assert len(expand_grid(spec)) == 8


def test_spec_unknown_key(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"content_paths": ["a"], "style_texts": ["t"],
                                                 "colour": 1}))
    with pytest.raises(InputError):
        CorpusSpec.from_file(tmp_path / "s.json")


# ---------------------------------------------------------------- job states

def test_status_transitions_monotone():
    job = expand_grid(spec_for(1, 1))[0]
    done = job.finish("done", dists=0.1, nima=5.0)
    with pytest.raises(InputError):
        done.finish("failed")
    with pytest.raises(InputError):
        done.retry()
    with pytest.raises(InputError):
        job.finish("pending")
    failed = job.finish("failed", message="boom")
    assert failed.retry().status == "pending"


def test_manifest_hash_order_independent_and_sensitive():
    jobs = expand_grid(spec_for(2, 2))
    assert manifest_hash(jobs) == manifest_hash(jobs[::-1])
    changed = [jobs[0].finish("done", dists=0.3, nima=5.0)] + jobs[1:]
    assert manifest_hash(changed) != manifest_hash(jobs)


# ---------------------------------------------------------------- execution

def test_run_resume_and_missing_file(tmp_path, images, tiny_config):
    spec = CorpusSpec(images + [str(tmp_path / "nope.png")], ["Desert Sand"],
                      output_root=str(tmp_path / "out"))
    jobs = expand_grid(spec, tiny_config.hash())
    mpath = tmp_path / "out" / "manifest.jsonl"
    res = run_jobs(jobs, 1, tiny_config, mpath)
    status = {j.content_id: j.status for j in res}
    assert status == {"photo0": "done", "photo1": "done", "nope": "failed"}
    failed = next(j for j in res if j.status == "failed")
    assert "not found" in failed.message
    for j in res:
        if j.status == "done":
            assert 0 <= j.dists <= 1 and 1 <= j.nima <= 10
            out = tmp_path / "out" / j.content_id / j.job_id.split("/")[1]
            assert (out / "output.png").exists() and (out / "manifest.json").exists()
            manifest = json.loads((out / "manifest.json").read_text())
            assert manifest["seed"] == j.seed
            assert manifest["config_hash"] == tiny_config.hash()

    n_lines = len(mpath.read_text().splitlines())
    ran = []
    res2 = run_jobs(jobs, 1, tiny_config, mpath, progress=ran.append)
    assert [r.content_id for r in ran] == ["nope"]
    assert [j.status for j in res2] == [j.status for j in res]
    # append-only: earlier lines untouched
    assert len(mpath.read_text().splitlines()) == n_lines + 2
    assert read_manifest(mpath)[failed.job_id].status == "failed"

    report = corpus_report(res2, 2)
    jsonschema.validate(report.to_dict(), REPORT_SCHEMA)
    assert report.extra["n_failed"] == 1


@pytest.mark.slow
def test_worker_count_does_not_change_outputs(tmp_path, images, tiny_config):
    spec = CorpusSpec(images, ["Desert Sand", "Snowy"], output_root=str(tmp_path / "a"))
    one = run_jobs(expand_grid(spec, tiny_config.hash()), 1, tiny_config, tmp_path / "a.jsonl")
    spec.output_root = str(tmp_path / "b")
    two = run_jobs(expand_grid(spec, tiny_config.hash()), 2, tiny_config, tmp_path / "b.jsonl")
    strip = lambda js: {(j.job_id, j.status, j.dists, j.nima, j.final_total) for j in js}
    assert strip(one) == strip(two)
    for j in one:
        rel = j.job_id
        a = (tmp_path / "a" / rel / "output.png").read_bytes()
        b = (tmp_path / "b" / rel / "output.png").read_bytes()
        assert a == b


def test_job_manifest_fields_roundtrip(tmp_path):
    from semcs.corpus import append_records

    job = JobManifest("c/1", "c", "c.png", "x", "h", "o", 3, categories=["a"])
    append_records(tmp_path / "m.jsonl", [job, job.finish("done", dists=0.5, nima=np.float64(4.0))])
    assert read_manifest(tmp_path / "m.jsonl")["c/1"].status == "done"
