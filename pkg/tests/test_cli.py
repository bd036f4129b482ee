import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from spx.cli import bench_matvec, dispatch
from spx.numerics import tensor_codec_read

SYNTH_ARGS = [
    "--samples", "512", "--d", "32", "--dff", "64", "--depth", "1",
    "--clusters-true", "4", "--planted", "4",
]


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "spx.cli", *args], capture_output=True, text=True
    )


def assert_dirs_identical(a: Path, b: Path):
    """Byte-identical trees, timestamps in summary.json excluded."""
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        if rel.name == "summary.json":
            pa = json.loads((a / rel).read_text())
            pb = json.loads((b / rel).read_text())
            pa.pop("created_unix"), pb.pop("created_unix")
            assert pa == pb, rel
        else:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "synth"
    r = run_cli("synth", "--seed", "7", "-o", str(out), *SYNTH_ARGS)
    assert r.returncode == 0, r.stderr
    return out


class TestExitCodes:
    def test_unknown_subcommand(self):
        assert run_cli("definitely-not-a-command").returncode == 2

    def test_unknown_flag(self):
        assert run_cli("synth", "--bogus-flag", "1").returncode == 2

    def test_missing_model_dir(self, tmp_path):
        r = run_cli("analyze", "--model-dir", str(tmp_path / "nope"),
                    "-o", str(tmp_path / "out"))
        assert r.returncode == 3
        err = json.loads(r.stderr)
        assert err["error"] == "missing_file"

    def test_invalid_config_file(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        r = run_cli("synth", "--config", str(cfg), "-o", str(tmp_path / "o"))
        assert r.returncode == 4
        assert json.loads(r.stderr)["error"] == "invalid_config"

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"no_such_knob": 1}))
        r = run_cli("synth", "--config", str(cfg), "-o", str(tmp_path / "o"))
        assert r.returncode == 4

    def test_bad_sparsity_value(self, synth_dir, tmp_path):
        r = run_cli("prune", "--model-dir", str(synth_dir), "--sparsity", "1.5",
                    "-o", str(tmp_path / "o"))
        assert r.returncode == 4


class TestDeterminism:
    def test_synth_rerun_identical(self, tmp_path):
        out = tmp_path / "synth"
        r = run_cli("synth", "--seed", "7", "-o", str(out), *SYNTH_ARGS)
        assert r.returncode == 0, r.stderr
        snapshot = tmp_path / "snapshot"
        shutil.copytree(out, snapshot)
        r = run_cli("synth", "--seed", "7", "-o", str(out), *SYNTH_ARGS)
        assert r.returncode == 0, r.stderr
        assert_dirs_identical(snapshot, out)

    def test_expand_rerun_identical(self, synth_dir, tmp_path):
        out = tmp_path / "expand"
        args = ("expand", "--model-dir", str(synth_dir), "--clusters", "2",
                "--sparsity", "0.5", "--seed", "3", "-o", str(out))
        assert run_cli(*args).returncode == 0
        snapshot = tmp_path / "snapshot"
        shutil.copytree(out, snapshot)
        assert run_cli(*args).returncode == 0
        assert_dirs_identical(snapshot, out)

    def test_thread_count_does_not_change_artifacts(self, synth_dir, tmp_path):
        outs = []
        for name, threads in (("t1", "1"), ("t4", "4")):
            out = tmp_path / name
            r = run_cli("expand", "--model-dir", str(synth_dir), "--clusters", "4",
                        "--sparsity", "0.5", "--seed", "3", "--threads", threads,
                        "-o", str(out))
            assert r.returncode == 0, r.stderr
            outs.append(out)
        # thread_count is echoed in the summary; compare the tensors.
        for rel in sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.spxt")):
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()

    def test_eval_rerun_identical(self, synth_dir, tmp_path):
        out = tmp_path / "eval"
        args = ("eval", "--model-dir", str(synth_dir), "--axis", "clusters",
                "--grid", "1,2", "--sparsity", "0.8", "--seed", "2",
                "--pair-budget", "2000", "-o", str(out))
        assert run_cli(*args).returncode == 0
        snapshot = tmp_path / "snapshot"
        shutil.copytree(out, snapshot)
        assert run_cli(*args).returncode == 0
        assert_dirs_identical(snapshot, out)


class TestPipelineIdentity:
    def test_expand_c1_matches_prune_tensors(self, synth_dir, tmp_path):
        prune_out = tmp_path / "prune"
        expand_out = tmp_path / "expand"
        r1 = run_cli("prune", "--model-dir", str(synth_dir), "--method", "sparsegpt",
                     "--sparsity", "0.5", "--seed", "7", "-o", str(prune_out))
        r2 = run_cli("expand", "--model-dir", str(synth_dir), "--clusters", "1",
                     "--sparsity", "0.5", "--seed", "7", "-o", str(expand_out))
        assert r1.returncode == 0 and r2.returncode == 0
        assert (prune_out / "block0_up.spxt").read_bytes() == (
            expand_out / "block0_up" / "expert_000.spxt"
        ).read_bytes()
        assert (prune_out / "block0_down.spxt").read_bytes() == (
            expand_out / "block0_down" / "expert_000.spxt"
        ).read_bytes()

    def test_subset_prune_leaves_other_rows(self, synth_dir, tmp_path):
        out = tmp_path / "subset"
        r = run_cli("prune", "--model-dir", str(synth_dir), "--subset-fraction",
                    "0.0625", "--selector", "wd", "--sparsity", "0.9",
                    "--seed", "7", "-o", str(out))
        assert r.returncode == 0, r.stderr
        orig = tensor_codec_read(synth_dir / "block0_up.spxt")
        pruned = tensor_codec_read(out / "block0_up.spxt")
        changed = [i for i in range(orig.shape[0]) if not np.array_equal(orig[i], pruned[i])]
        assert len(changed) == 4  # ceil(0.0625 * 64)

    def test_keep_dense_prune(self, synth_dir, tmp_path):
        out = tmp_path / "kd"
        r = run_cli("prune", "--model-dir", str(synth_dir), "--keep-dense-x", "0.1",
                    "--sparsity", "0.5", "--seed", "7", "-o", str(out))
        assert r.returncode == 0, r.stderr
        pruned = tensor_codec_read(out / "block0_up.spxt")
        dense_rows = sum(
            1 for row in pruned if int((row == 0).sum()) == 0
        )
        assert dense_rows >= 7  # ceil(0.1 * 64) kept dense

    def test_analyze_outputs(self, synth_dir, tmp_path):
        out = tmp_path / "an"
        r = run_cli("analyze", "--model-dir", str(synth_dir), "-o", str(out),
                    "--pair-budget", "2000", "--seed", "1")
        assert r.returncode == 0, r.stderr
        assert (out / "wd_block0_up.csv").exists()
        assert (out / "md_block0_up.csv").exists()
        assert list(out.glob("io_pairs_neuron*.csv"))
        assert list(out.glob("hist_neuron*.csv"))


class TestBench:
    def test_mac_counts_exact(self):
        rows = bench_matvec(
            [(64, 128)], ["dense", "csr", "packed24"], 0.9, reps=10, warmup=2,
            seed=3,
        )
        by_fmt = {r["format"]: r for r in rows}
        assert by_fmt["dense"]["macs"] == 64 * 128
        assert by_fmt["packed24"]["macs"] == 64 * 128 // 2
        # csr nnz is the seeded random mask's exact survivor count
        assert 0 < by_fmt["csr"]["macs"] < 64 * 128 * 0.2

    def test_csr_tenfold_reduction(self):
        rows = bench_matvec([(100, 1000)], ["csr"], 0.9, reps=10, warmup=1, seed=5)
        macs = rows[0]["macs"]
        assert abs(macs - 10_000) < 1200  # ~nnz at 90% sparsity

    def test_reps_floor(self):
        with pytest.raises(ValueError):
            bench_matvec([(8, 8)], ["dense"], 0.5, reps=5, warmup=0, seed=1)

    def test_cli_bench_mac_columns_deterministic(self, tmp_path):
        outs = []
        for name in ("b1", "b2"):
            out = tmp_path / name
            r = run_cli("bench", "--sizes", "64x128", "--reps", "10",
                        "--warmup", "2", "-o", str(out))
            assert r.returncode == 0, r.stderr
            outs.append(out)
        def macs(path):
            lines = (path / "bench.csv").read_text().strip().splitlines()
            return [line.split(",")[:4] for line in lines]
        assert macs(outs[0]) == macs(outs[1])


class TestDispatch:
    def test_dispatch_returns_usage_code(self):
        assert dispatch(["bogus"]) == 2

    def test_config_file_applies(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"samples": 64, "d": 8, "d_ff": 8, "depth": 1,
                                   "n_clusters_true": 2, "planted_count": 0}))
        out = tmp_path / "out"
        code = dispatch(["synth", "--config", str(cfg), "--seed", "1",
                        "-o", str(out)])
        assert code == 0
        x = tensor_codec_read(out / "calibration.spxt")
        assert x.shape == (8, 64)

    def test_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"samples": 64, "d": 8, "d_ff": 8, "depth": 1,
                                   "n_clusters_true": 2, "planted_count": 0}))
        out = tmp_path / "out"
        code = dispatch(["synth", "--config", str(cfg), "--seed", "1",
                        "--samples", "96", "-o", str(out)])
        assert code == 0
        assert tensor_codec_read(out / "calibration.spxt").shape == (8, 96)
