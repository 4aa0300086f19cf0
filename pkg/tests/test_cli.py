import csv
import json
from pathlib import Path

from skywind import fileio
from skywind.cli import main


def scene_spec_json(tmp_path, n_frames=6, rows=40, cols=52):
    spec = {
        "layers": [
            {
                "velocity_px": [1.5, 0.5],
                "height_m": 3000.0,
                "coverage": 1.0,
                "temp_amplitude_k": 4.0,
                "wavelength_px": [18.0, 30.0],
                "texture_seed": 1,
            }
        ],
        "n_frames": n_frames,
        "rows": rows,
        "cols": cols,
        "frame_period_s": 15.0,
    }
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(spec))
    return path


def config_file(tmp_path):
    path = tmp_path / "pipeline.cfg"
    path.write_text(
        "n_layers = 1\nsolver = mo\nframe_rate = 15.0\nn_samples = 80\nseed = 0\n"
    )
    return path


class TestCliFlow:
    def test_synth_run_plot_cv(self, tmp_path, capsys):
        spec = scene_spec_json(tmp_path)
        data_dir = tmp_path / "data"
        assert main(["synth", str(spec), "--out", str(data_dir)]) == 0
        manifest = data_dir / "manifest.json"
        assert manifest.exists()
        assert (data_dir / "truth.json").exists()
        assert len(fileio.read_manifest(manifest)) == 6

        out_dir = tmp_path / "run"
        cfg = config_file(tmp_path)
        assert main(
            ["run", str(manifest), "--config", str(cfg), "--out", str(out_dir)]
        ) == 0
        results_csv = out_dir / "results.csv"
        assert results_csv.exists()
        rows = list(csv.DictReader(results_csv.open()))
        assert rows and all(Path(r["field_path"]).exists() for r in rows)

        plots_dir = tmp_path / "plots"
        assert main(
            ["plot", str(results_csv), "--manifest", str(manifest),
             "--out", str(plots_dir)]
        ) == 0
        svgs = sorted(plots_dir.glob("*.svg"))
        assert len(svgs) == len(rows)
        head = svgs[0].read_text()[:500]
        assert "<svg" in head  # vector graphics, not a raster dump

        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({
            "kernel": "linear", "c_reg": [10.0, 31.06], "epsilon": [0.31],
        }))
        cv_dir = tmp_path / "cv"
        assert main(
            ["cv", str(manifest), "--grid", str(grid), "--config", str(cfg),
             "--out", str(cv_dir)]
        ) == 0
        table = cv_dir / "cv_table.csv"
        assert table.exists()
        lines = table.read_text().strip().splitlines()
        assert lines[0].startswith("kernel,C,epsilon")
        assert len(lines) == 3
        out = capsys.readouterr().out
        assert "best:" in out

    def test_error_paths_exit_code(self, tmp_path):
        missing = tmp_path / "nope.json"
        assert main(["run", str(missing), "--out", str(tmp_path / "o")]) == 2

    def test_synth_empty_spec_rejected(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text(json.dumps({"layers": [], "n_frames": 0}))
        assert main(["synth", str(path), "--out", str(tmp_path / "d")]) == 2
