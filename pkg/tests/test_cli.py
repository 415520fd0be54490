import subprocess
import sys

import numpy as np
import pytest

from nclkit import Modality, QueryQueue, l2_normalize, write_embeddings
from nclkit.cli import main

from conftest import unit_set


def csv_body(path):
    """CSV content with the leading version comment stripped."""
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# nclkit ")
    return "\n".join(lines[1:])


def csv_rows(path):
    return [line.split(",") for line in csv_body(path).strip().split("\n")]


@pytest.fixture
def emb_pair(tmp_path, rng):
    texts = unit_set(rng, 12, 8)
    videos = unit_set(rng, 12, 8, Modality.VIDEO)
    tpath = tmp_path / "texts.emb1"
    vpath = tmp_path / "videos.emb1"
    write_embeddings(tpath, texts)
    write_embeddings(vpath, videos)
    return tpath, vpath, texts, videos


class TestNormalize:
    def test_converged_report_has_tiny_post_error(self, tmp_path, emb_pair):
        tpath, vpath, _, _ = emb_pair
        out = tmp_path / "biases.csv"
        rc = main(
            [
                "normalize",
                "--text", str(tpath),
                "--video", str(vpath),
                "--gamma", "0.1",
                "--iters", "1000",
                "--out", str(out),
            ]
        )
        assert rc == 0
        rows = csv_rows(tmp_path / "biases.csv.report.csv")
        assert rows[0] == ["direction", "pre_error", "post_error"]
        for direction, pre, post in rows[1:]:
            assert float(post) < 1e-6
            assert float(pre) > float(post)
        bias_rows = csv_rows(out)
        assert bias_rows[0] == ["axis", "index", "bias"]
        assert len(bias_rows) == 1 + 12 + 12

    def test_zero_gamma_is_usage_error(self, tmp_path, emb_pair):
        tpath, vpath, _, _ = emb_pair
        rc = main(
            ["normalize", "--text", str(tpath), "--video", str(vpath),
             "--gamma", "0", "--out", str(tmp_path / "b.csv")]
        )
        assert rc == 2

    def test_all_ones_counts_file_matches_uniform(self, tmp_path, emb_pair):
        tpath, vpath, _, _ = emb_pair
        counts = tmp_path / "counts.txt"
        counts.write_text("1\n" * 12)
        out_u = tmp_path / "uniform.csv"
        out_c = tmp_path / "counts.csv"
        assert main(["normalize", "--text", str(tpath), "--video", str(vpath),
                     "--out", str(out_u)]) == 0
        assert main(["normalize", "--text", str(tpath), "--video", str(vpath),
                     "--prior", str(counts), "--out", str(out_c)]) == 0
        assert csv_body(out_u) == csv_body(out_c)

    def test_missing_input_is_data_error(self, tmp_path):
        rc = main(["normalize", "--text", str(tmp_path / "nope.emb1"),
                   "--video", str(tmp_path / "nope.emb1"), "--out", str(tmp_path / "b.csv")])
        assert rc == 3

    def test_bad_magic_is_data_error(self, tmp_path, emb_pair):
        tpath, vpath, _, _ = emb_pair
        bad = tmp_path / "bad.emb1"
        bad.write_bytes(b"NOPE" + bytes(28))
        rc = main(["normalize", "--text", str(bad), "--video", str(vpath),
                   "--out", str(tmp_path / "b.csv")])
        assert rc == 3


class TestEval:
    def test_diagonal_fixture_perfect_recall(self, tmp_path, rng):
        base = unit_set(rng, 8, 6)
        tpath, vpath = tmp_path / "t.emb1", tmp_path / "v.emb1"
        write_embeddings(tpath, base)
        write_embeddings(vpath, l2_normalize(base.vectors, Modality.VIDEO))
        out = tmp_path / "metrics.csv"
        rc = main(["eval", "--text", str(tpath), "--video", str(vpath), "--out", str(out)])
        assert rc == 0
        rows = csv_rows(out)
        header, values = rows
        metrics = dict(zip(header, values))
        assert float(metrics["r1"]) == 1.0
        assert float(metrics["median_rank"]) == 1.0

    def test_oracle_biases_zero_the_normalization_error(self, tmp_path, emb_pair):
        tpath, vpath, _, _ = emb_pair
        out_none = tmp_path / "none.csv"
        out_oracle = tmp_path / "oracle.csv"
        common = ["eval", "--text", str(tpath), "--video", str(vpath),
                  "--gamma", "0.1", "--iters", "1000"]
        assert main(common + ["--biases", "none", "--out", str(out_none)]) == 0
        assert main(common + ["--biases", "oracle", "--out", str(out_oracle)]) == 0
        err_none = dict(zip(*csv_rows(out_none)))
        err_orc = dict(zip(*csv_rows(out_oracle)))
        assert float(err_orc["t2v_norm_error"]) < 1e-6
        assert float(err_none["t2v_norm_error"]) > 1e-3

    def test_queue_of_test_queries_matches_oracle_byte_for_byte(self, tmp_path, emb_pair):
        tpath, vpath, texts, videos = emb_pair
        tq = QueryQueue(Modality.TEXT, 8, capacity=12)
        tq.push_batch(texts.vectors)  # the queue holds exactly the test queries
        vq = QueryQueue(Modality.VIDEO, 8, capacity=12)
        vq.push_batch(videos.vectors)
        tq_path, vq_path = tmp_path / "tq.bin", tmp_path / "vq.bin"
        tq.save(tq_path)
        vq.save(vq_path)
        common = ["eval", "--text", str(tpath), "--video", str(vpath), "--gamma", "0.05"]
        out_q = tmp_path / "queue.csv"
        out_o = tmp_path / "oracle.csv"
        assert main(common + ["--biases", "queue", "--text-queue", str(tq_path),
                              "--video-queue", str(vq_path), "--out", str(out_q)]) == 0
        assert main(common + ["--biases", "oracle", "--out", str(out_o)]) == 0
        assert csv_body(out_q) == csv_body(out_o)

    def test_bias_file_round_trip(self, tmp_path, emb_pair):
        tpath, vpath, _, _ = emb_pair
        bias_path = tmp_path / "biases.csv"
        assert main(["normalize", "--text", str(tpath), "--video", str(vpath),
                     "--gamma", "0.1", "--iters", "500", "--out", str(bias_path)]) == 0
        out = tmp_path / "metrics.csv"
        rc = main(["eval", "--text", str(tpath), "--video", str(vpath), "--gamma", "0.1",
                   "--biases", "file", "--biases-file", str(bias_path), "--out", str(out)])
        assert rc == 0
        metrics = dict(zip(*csv_rows(out)))
        assert float(metrics["t2v_norm_error"]) < 1e-5

    def test_gt_file_and_v2t_direction(self, tmp_path, rng):
        texts = unit_set(rng, 6, 5)
        videos = unit_set(rng, 3, 5, Modality.VIDEO)
        tpath, vpath = tmp_path / "t.emb1", tmp_path / "v.emb1"
        write_embeddings(tpath, texts)
        write_embeddings(vpath, videos)
        gt = tmp_path / "gt.csv"
        gt.write_text("".join(f"{q},{q // 2}\n" for q in range(6)))
        out = tmp_path / "m.csv"
        rc = main(["eval", "--text", str(tpath), "--video", str(vpath), "--gt", str(gt),
                   "--direction", "v2t", "--ks", "1,3", "--out", str(out)])
        assert rc == 0
        header = csv_rows(out)[0]
        assert header[:2] == ["r1", "r3"]

    def test_rectangular_without_gt_is_usage_error(self, tmp_path, rng):
        write_embeddings(tmp_path / "t.emb1", unit_set(rng, 6, 5))
        write_embeddings(tmp_path / "v.emb1", unit_set(rng, 3, 5, Modality.VIDEO))
        rc = main(["eval", "--text", str(tmp_path / "t.emb1"), "--video", str(tmp_path / "v.emb1"),
                   "--out", str(tmp_path / "m.csv")])
        assert rc == 2


CONFIG_TEXT = """\
# desk-scale run
n_train=120
n_test=40
latent_dim=6
text_dim=12
video_dim=16
noise_sigma=0.2
gamma=0.1
batch_size=32
epochs=1
learning_rate=0.5
queue_capacity=64
"""


class TestTrainCommand:
    def test_repeat_runs_are_byte_identical(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(CONFIG_TEXT)
        for name in ("a", "b"):
            rc = main(["train", "--config", str(cfg), "--loss", "cl",
                       "--seed", "9", "--out", str(tmp_path / name)])
            assert rc == 0
        assert (tmp_path / "a" / "run.csv").read_bytes() == (tmp_path / "b" / "run.csv").read_bytes()
        assert (tmp_path / "a" / "config.txt").read_text() == (tmp_path / "b" / "config.txt").read_text()

    def test_missing_seed_is_usage_error(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(CONFIG_TEXT)
        rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "seed" in capsys.readouterr().err

    def test_unknown_config_key_is_usage_error(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(CONFIG_TEXT + "wat=1\n")
        rc = main(["train", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "wat" in capsys.readouterr().err

    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(CONFIG_TEXT + "loss=cl\n")
        rc = main(["train", "--config", str(cfg), "--loss", "ncl",
                   "--seed", "4", "--out", str(tmp_path / "o")])
        assert rc == 0
        assert "loss_kind=ncl" in (tmp_path / "o" / "config.txt").read_text()


class TestSweepCommand:
    def test_sweep_outputs_sorted_unique_sizes(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(CONFIG_TEXT)
        out = tmp_path / "sweep.csv"
        rc = main(["sweep", "--config", str(cfg), "--seed", "3",
                   "--sizes", "8,1,8,32", "--out", str(out)])
        assert rc == 0
        rows = csv_rows(out)
        assert rows[0] == ["k", "t2v_r1", "v2t_r1"]
        assert [r[0] for r in rows[1:]] == ["1", "8", "32"]


class TestAnalyzeCommand:
    def test_clustered_fixture_stats(self, tmp_path, rng):
        center_t = np.concatenate([[4.0], np.zeros(7)])
        center_v = np.concatenate([np.zeros(7), [4.0]])
        texts = l2_normalize(center_t + rng.normal(size=(16, 8)))
        videos = l2_normalize(center_v + rng.normal(size=(16, 8)), Modality.VIDEO)
        write_embeddings(tmp_path / "t.emb1", texts)
        write_embeddings(tmp_path / "v.emb1", videos)
        rc = main(["analyze", "--text", str(tmp_path / "t.emb1"), "--video", str(tmp_path / "v.emb1"),
                   "--out", str(tmp_path / "report")])
        assert rc == 0
        stats = {row[0]: float(row[1]) for row in csv_rows(tmp_path / "report_stats.csv")[1:]}
        assert stats["text_text"] > stats["text_video"]
        assert stats["video_video"] > stats["text_video"]
        assert stats["decomposition_residual"] < 1e-12
        assert stats["weighted_softmax_deviation"] < 1e-7
        rates = csv_rows(tmp_path / "report_false_rates.csv")
        assert rates[0] == ["bin_lo", "bin_hi", "count", "fnr", "fpr"]

    def test_zero_mean_fixture_has_vanishing_bias_terms(self, tmp_path, rng):
        half_t = unit_set(rng, 4, 6).vectors
        half_v = unit_set(rng, 4, 6).vectors
        write_embeddings(tmp_path / "t.emb1", l2_normalize(np.concatenate([half_t, -half_t])))
        write_embeddings(
            tmp_path / "v.emb1", l2_normalize(np.concatenate([half_v, -half_v]), Modality.VIDEO)
        )
        rc = main(["analyze", "--text", str(tmp_path / "t.emb1"), "--video", str(tmp_path / "v.emb1"),
                   "--out", str(tmp_path / "report")])
        assert rc == 0
        stats = {row[0]: float(row[1]) for row in csv_rows(tmp_path / "report_stats.csv")[1:]}
        assert stats["mean_abs_query_bias_term"] < 1e-12
        assert stats["mean_abs_item_bias_term"] < 1e-12

    def test_export_sims(self, tmp_path, emb_pair):
        tpath, vpath, texts, videos = emb_pair
        sims_path = tmp_path / "sims.csv"
        rc = main(["analyze", "--text", str(tpath), "--video", str(vpath),
                   "--out", str(tmp_path / "rep"), "--export-sims", str(sims_path)])
        assert rc == 0
        rows = csv_rows(sims_path)
        assert len(rows) == 12 and len(rows[0]) == 12


class TestExitCodeMapping:
    def test_numerical_failure_maps_to_4(self, monkeypatch, tmp_path):
        from nclkit import NonFinite
        import nclkit.cli as cli

        def boom(args):
            raise NonFinite("synthetic failure")

        monkeypatch.setattr(cli, "cmd_train", boom)
        parser_args = ["train", "--seed", "1", "--out", str(tmp_path / "o")]
        # rebuild parser so the monkeypatched handler is picked up
        monkeypatch.setattr(cli, "build_parser", lambda: _parser_with(boom))

        def _parser_with(handler):
            p = cli.argparse.ArgumentParser()
            sub = p.add_subparsers()
            t = sub.add_parser("train")
            t.add_argument("--seed")
            t.add_argument("--out")
            t.set_defaults(handler=handler)
            return p

        assert cli.main(parser_args) == 4

    def test_threads_env_validation(self, monkeypatch, tmp_path, emb_pair):
        tpath, vpath, _, _ = emb_pair
        monkeypatch.setenv("NCLKIT_THREADS", "banana")
        rc = main(["normalize", "--text", str(tpath), "--video", str(vpath),
                   "--out", str(tmp_path / "b.csv")])
        assert rc == 2

    def test_threads_env_cap_works(self, monkeypatch, tmp_path, emb_pair):
        tpath, vpath, _, _ = emb_pair
        monkeypatch.setenv("NCLKIT_THREADS", "1")
        rc = main(["normalize", "--text", str(tpath), "--video", str(vpath),
                   "--out", str(tmp_path / "b.csv")])
        assert rc == 0


class TestConsoleEntryPoint:
    def test_version_via_subprocess(self):
        out = subprocess.run(
            [sys.executable, "-m", "nclkit.cli", "--version"],
            capture_output=True,
            text=True,
        )
        assert out.returncode == 0
        assert "nclkit" in out.stdout
