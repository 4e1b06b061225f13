import numpy as np
import pytest

from dvmatch import io_formats as io
from dvmatch.cli import main
from dvmatch.core import PointCloud
from dvmatch.runconfig import ConfigError, SCHEMA, load_config, parse_config_text


def write_cloud(path, seed=0, n=40):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    io.write_xyz(path, PointCloud(pts))
    return pts


QUICK_CFG = """
outer_iters = 3
inner_iters = 3
lambda_geo = 0.0
node_count = 8
"""


class TestRunConfig:
    def test_defaults_cover_schema(self):
        values = load_config(None)
        assert set(values) == set(SCHEMA)
        assert values["lambda_deform"] == 0.05
        assert values["top_n"] == 10

    def test_parse_with_comments(self):
        values = parse_config_text("# hi\nouter_iters = 4  # inline\n")
        assert values["outer_iters"] == 4

    def test_unknown_key_suggests(self):
        with pytest.raises(ConfigError, match="outer_iters"):
            parse_config_text("outer_itters = 4\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("seed = 1\nseed = 2\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config_text("outer_iters = soon\n")


class TestProjectCommand:
    def test_writes_views_and_records(self, tmp_path):
        cloud = tmp_path / "c.xyz"
        write_cloud(cloud, n=30)
        out = tmp_path / "views"
        assert main(["project", str(cloud), "--out", str(out),
                     "--height", "32", "--width", "32"]) == 0
        for axis in ("z", "x", "y"):
            assert (out / f"{axis}.png").exists()
            rec = io.read_dvpr(out / f"{axis}.dvpr", axis=axis, height=32, width=32)
            assert len(rec) == 30

    def test_rerun_byte_identical(self, tmp_path):
        cloud = tmp_path / "c.xyz"
        write_cloud(cloud, seed=1, n=25)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(["project", str(cloud), "--out", str(out1), "--height", "16", "--width", "16"])
        main(["project", str(cloud), "--out", str(out2), "--height", "16", "--width", "16"])
        for name in ("z.png", "x.png", "y.png", "z.dvpr"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_default_size_224(self, tmp_path):
        cloud = tmp_path / "c.xyz"
        write_cloud(cloud, seed=2, n=10)
        out = tmp_path / "v"
        main(["project", str(cloud), "--out", str(out)])
        feat = io.read_dvpr(out / "z.dvpr", height=224, width=224)
        assert feat.height == 224 and feat.width == 224

    def test_thread_cap_does_not_change_results(self, tmp_path, monkeypatch):
        cloud = tmp_path / "c.xyz"
        write_cloud(cloud, seed=12, n=30)
        out1, out2 = tmp_path / "p1", tmp_path / "p2"
        monkeypatch.setenv("DVM_THREADS", "1")
        main(["project", str(cloud), "--out", str(out1), "--height", "16", "--width", "16"])
        monkeypatch.setenv("DVM_THREADS", "3")
        main(["project", str(cloud), "--out", str(out2), "--height", "16", "--width", "16"])
        for name in ("z.png", "x.png", "y.png"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


class TestGeodesicsCommand:
    def test_matrix_properties(self, tmp_path):
        cloud = tmp_path / "c.xyz"
        g = np.linspace(0, 1, 12)
        X, Y = np.meshgrid(g, g, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), np.zeros(144)], axis=1)
        io.write_xyz(cloud, PointCloud(pts))
        out = tmp_path / "g.dvgm"
        assert main(["geodesics", str(cloud), "--out", str(out)]) == 0
        geo = io.read_dvgm(out)
        assert (np.diag(geo.distances) == 0).all()
        assert np.array_equal(geo.distances, geo.distances.T)

    def test_unreadable_input(self, tmp_path):
        assert main(["geodesics", str(tmp_path / "nope.xyz"), "--out",
                     str(tmp_path / "g.dvgm")]) == 1


class TestRegisterCommand:
    def test_identity_pair(self, tmp_path):
        cloud = tmp_path / "c.xyz"
        write_cloud(cloud, seed=3, n=40)
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(QUICK_CFG)
        out = tmp_path / "run"
        code = main(["register", str(cloud), str(cloud), "--out", str(out),
                     "--config", str(cfg)])
        assert code == 0
        dmap = io.read_dense_map(f"{out}.map")
        assert np.array_equal(dmap, np.arange(40))
        assert (tmp_path / "run.dvtx").exists()
        log = (tmp_path / "run.log").read_text()
        assert "L_deform=" in log and "total=" in log

    def test_partial_mode_log_naming(self, tmp_path):
        cloud = tmp_path / "c.xyz"
        write_cloud(cloud, seed=4, n=30)
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(QUICK_CFG)
        out = tmp_path / "run"
        main(["register", str(cloud), str(cloud), "--out", str(out),
              "--config", str(cfg), "--mode", "partial"])
        assert "L_deform_unilateral=" in (tmp_path / "run.log").read_text()

    def test_missing_features_falls_back(self, tmp_path, capsys):
        cloud = tmp_path / "c.xyz"
        write_cloud(cloud, seed=5, n=30)
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(QUICK_CFG)
        out = tmp_path / "run"
        code = main(["register", str(cloud), str(cloud), "--out", str(out),
                     "--config", str(cfg), "--features-source", str(tmp_path / "missing")])
        assert code == 0
        assert "falling back" in capsys.readouterr().err

    def test_reproducible_outputs(self, tmp_path):
        cloud = tmp_path / "c.xyz"
        write_cloud(cloud, seed=6, n=35)
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(QUICK_CFG)
        main(["register", str(cloud), str(cloud), "--out", str(tmp_path / "r1"),
              "--config", str(cfg)])
        main(["register", str(cloud), str(cloud), "--out", str(tmp_path / "r2"),
              "--config", str(cfg)])
        assert (tmp_path / "r1.map").read_bytes() == (tmp_path / "r2.map").read_bytes()
        assert (tmp_path / "r1.dvtx").read_bytes() == (tmp_path / "r2.dvtx").read_bytes()


class TestEvalCommand:
    def test_perfect_map(self, tmp_path, capsys):
        cloud = tmp_path / "t.xyz"
        write_cloud(cloud, seed=7, n=20)
        m = tmp_path / "m.txt"
        io.write_dense_map(m, np.arange(20))
        assert main(["eval", str(m), str(m), str(cloud)]) == 0
        out = capsys.readouterr().out
        assert "euclidean_error" in out and "0.000000" in out

    def test_tsv_format_with_geodesics(self, tmp_path, capsys):
        pts = np.random.default_rng(8).normal(size=(20, 3))
        cloud = tmp_path / "t.xyz"
        io.write_xyz(cloud, PointCloud(pts))
        m = tmp_path / "m.txt"
        io.write_dense_map(m, np.arange(20))
        from dvmatch.geodesics import GeodesicMatrix

        d = np.abs(np.random.default_rng(9).normal(size=(20, 20)))
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0)
        gfile = tmp_path / "g.dvgm"
        io.write_dvgm(gfile, GeodesicMatrix(distances=d))
        assert main(["eval", str(m), str(m), str(cloud), "--geodesics", str(gfile),
                     "--format", "tsv"]) == 0
        out = capsys.readouterr().out
        lines = out.strip().splitlines()
        assert lines[0] == "metric\tvalue"
        assert any(line.startswith("geodesic_error\t") for line in lines)

    def test_match_command_full_loop(self, tmp_path, capsys):
        cloud = tmp_path / "c.xyz"
        write_cloud(cloud, seed=10, n=30)
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(QUICK_CFG)
        gt = tmp_path / "gt.txt"
        io.write_dense_map(gt, np.arange(30))
        out = tmp_path / "m"
        code = main(["match", str(cloud), str(cloud), "--out", str(out),
                     "--config", str(cfg), "--ground-truth", str(gt),
                     "--format", "tsv"])
        assert code == 0
        out_text = capsys.readouterr().out
        assert "accuracy(0.01)\t1" in out_text
