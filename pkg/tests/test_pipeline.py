import json

import pytest
import torch

from cadet import cli
from cadet.data.coco import save_coco_json, save_images
from cadet.data.loader import build_training_set
from cadet.data.shapes import ShapesConfig, generate_shapes
from cadet.metrics import ARCurve, EvalReport, harmonic_mean
from cadet.pipeline.config import ConfigError, Variant, all_variants, config_from_dict, config_reference, load_config
from cadet.pipeline.experiments import (
    hierarchy_for,
    kept_classes,
    load_source,
    run_experiment,
    train_from_config,
)
from cadet.pipeline.report import emit_report, render_table, summary_table
from cadet.protocol import ClassSplit
from helpers import MINI_CLASSES, mini_experiment


class TestConfig:
    def test_unknown_keys_name_their_path(self):
        doc = mini_experiment()
        doc["training"]["stepz"] = 3
        with pytest.raises(ConfigError, match="training.stepz"):
            config_from_dict(doc)
        with pytest.raises(ConfigError, match="train.shapes.colour"):
            config_from_dict(mini_experiment(train={"shapes": {"colour": 1}}))

    @pytest.mark.parametrize(
        "override",
        [
            {"experiment": "III"},
            {"variant": "SSD-aw-prop"},
            {"variant": "YOLO-ag"},
            {"split": None},
            {"training": {"steps": -1}},
            {"evaluation": {"k_values": [10, 1]}},
            {"adversarial": {"alpha": -0.5}},
            {"train": {}},
            {"train": {"annotations": "a.json"}},
            {"model": [1, 2]},
        ],
    )
    def test_invalid_documents(self, override):
        with pytest.raises(ConfigError):
            config_from_dict(mini_experiment(**override))

    def test_yaml_and_json_files_agree(self, tmp_path):
        import yaml

        doc = mini_experiment()
        (tmp_path / "c.json").write_text(json.dumps(doc))
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(doc))
        assert load_config(tmp_path / "c.json") == load_config(tmp_path / "c.yaml")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")

    def test_reference_documents_every_key(self):
        text = config_reference()
        for key in ("training.steps", "adversarial.alpha", "train.shapes.clutter", "hierarchy.reference"):
            assert f"`{key}`" in text


class TestVariants:
    def test_eleven_names(self):
        names = all_variants()
        assert len(names) == len(set(names)) == 11
        assert "FRCNN-aw-prop" in names and "SSD-ft-ag-ad" in names

    @pytest.mark.parametrize(
        "name,expected",
        [
            ("SSD-aw", ("one_stage", "class_aware", False, False, False)),
            ("FRCNN-ag", ("two_stage", "class_agnostic", False, False, False)),
            ("SSD-ft-ag-ad", ("one_stage", "class_agnostic", True, True, False)),
            ("FRCNN-aw-prop", ("two_stage", "class_aware", False, False, True)),
        ],
    )
    def test_parse(self, name, expected):
        v = Variant.parse(name)
        assert (v.mode, v.head_type, v.finetune, v.adversarial, v.proposals) == expected


class TestTraining:
    def test_unseen_annotations_never_reach_training(self):
        cfg = config_from_dict(mini_experiment())
        index, pixels = load_source(cfg.train)
        data = build_training_set(index, pixels, cfg.split["seen"], 64)
        unseen_ids = index.vocabulary.ids(["cross", "ring"])
        by_image = index.annotations_by_image()
        for image_id, labels, boxes in zip(data.image_ids, data.labels, data.boxes):
            assert set(labels.tolist()) <= {0, 1, 2}
            seen_anns = [a for a in by_image[image_id] if a.class_id not in unseen_ids]
            assert len(boxes) == len(seen_anns)
        only_unseen = [i for i, anns in by_image.items() if anns and all(a.class_id in unseen_ids for a in anns)]
        assert only_unseen and not set(only_unseen) & set(data.image_ids)

    def test_seed_determinism(self):
        a, _ = train_from_config(config_from_dict(mini_experiment(seed=4)))
        b, _ = train_from_config(config_from_dict(mini_experiment(seed=4)))
        c, _ = train_from_config(config_from_dict(mini_experiment(seed=5)))
        assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
        assert not all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), c.state_dict().values()))

    def test_outputs_written(self, tmp_path):
        model, state = train_from_config(config_from_dict(mini_experiment("SSD-ag-ad", tmp_path)))
        assert state["model_updates"] == 20 // 6 and state["adversarial"]["alpha"] == 1.0
        assert (tmp_path / "model.pt").exists()
        assert len((tmp_path / "train_log.jsonl").read_text().splitlines()) == 20

    def test_split_vocabulary_mismatch(self):
        split = {"seen": ["circle", "square", "triangle"], "unseen_easy": "hexagon"}
        with pytest.raises(ConfigError, match="hexagon"):
            train_from_config(config_from_dict(mini_experiment(split=split)))


def experiment_two(**overrides):
    shapes = dict(image_size=64, min_size=10, max_size=30, max_objects=3)
    doc = mini_experiment(
        experiment="II",
        split=None,
        train={"shapes": dict(shapes, classes=["circle", "square"], num_images=16, seed=5)},
        eval={"shapes": dict(shapes, classes=MINI_CLASSES, num_images=12, seed=6)},
    )
    doc.update(overrides)
    return doc


class TestExperimentTwo:
    def test_kept_classes_on_shapes_hierarchy(self):
        cfg = config_from_dict(experiment_two())
        vocab = load_source(cfg.eval)[0].vocabulary
        assert kept_classes(hierarchy_for(cfg, None), ["circle", "square"], vocab) == ["triangle", "cross", "ring"]

    def test_runs_and_reports_kept_classes(self):
        report = run_experiment(config_from_dict(experiment_two()))
        assert sorted(report.per_class) == ["cross", "ring", "triangle"]

    def test_everything_excluded_fails_before_training(self, monkeypatch):
        import cadet.pipeline.experiments as experiments

        monkeypatch.setattr(experiments, "train_from_config", lambda *a, **k: pytest.fail("trained"))
        cfg = config_from_dict(experiment_two(hierarchy={"reference": ["Polygon", "Round shape", "cross", "closed curve"]}))
        with pytest.raises(ConfigError, match="nothing left"):
            run_experiment(cfg)


def _report(seen, unseen, per_class=None, per_size=None):
    s, u = ARCurve((10, 100), seen), ARCurve((10, 100), unseen)
    return EvalReport(s, u, harmonic_mean(s, u), per_class or {}, per_size or {})


class TestReports:
    def test_emit_is_idempotent(self, tmp_path):
        reports = {"A": _report([0.5, 0.7], [0.2, 0.4], {"cross": ARCurve((10, 100), [0.1, 0.3])})}
        emit_report(reports, tmp_path / "one", formats=("json", "table"))
        emit_report(reports, tmp_path / "two", formats=("json", "table"))
        for name in ("A.json", "table.txt"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
        again = EvalReport.from_json((tmp_path / "one" / "A.json").read_text())
        assert again.to_json() == reports["A"].to_json()

    def test_harmonic_mean_consistency(self):
        rep = _report([0.5, 0.0], [0.25, 0.0])
        assert rep.harmonic_mean.recalls == pytest.approx([2 * 0.5 * 0.25 / 0.75, 0.0])

    def test_table_without_micro_columns(self):
        table = summary_table({"A": _report([0.5, 0.7], [0.2, 0.4])})
        assert table.splitlines()[0].split() == ["Model", "Unseen@100"]

    def test_difficulty_orders_micro_columns(self):
        per_class = {"ring": ARCurve((10, 100), [0.1, 0.2]), "cross": ARCurve((10, 100), [0.3, 0.4])}
        table = summary_table({"A": _report([0.5, 0.7], [0.2, 0.4], per_class)}, {"ring": "easy", "cross": "hard"})
        assert table.splitlines()[0].split() == ["Model", "Unseen@100", "easy", "hard"]
        assert table.splitlines()[2].split() == ["A", "0.4000", "0.2000", "0.4000"]

    def test_empty_bucket_prints_na(self):
        empty = ARCurve((100,), [0.0], empty=True)
        table = summary_table({"A": _report([0.5, 0.7], [0.2, 0.4], per_size={"small": empty})})
        assert table.splitlines()[2].split()[-1] == "n/a"

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report({}, tmp_path, formats=("pdf",))

    def test_render_table_contains_curves(self):
        text = render_table({"A": _report([0.5, 0.7], [0.2, 0.4])})
        assert "0.5000   0.2000   0.2857" in text


class TestCLI:
    def test_config_keys(self, capsys):
        assert cli.main(["config-keys"]) == 0
        assert "`adversarial.alpha`" in capsys.readouterr().out

    def test_split_classes_on_bundled_fixture(self, capsys):
        assert cli.main(["split-classes"]) == 0
        split = ClassSplit.from_dict(json.loads(capsys.readouterr().out))
        assert (split.unseen_easy, split.unseen_medium, split.unseen_hard) == ("cow", "boat", "tvmonitor")

    def test_build_exclusion_applies_bundled_aliases(self, tmp_path):
        assert cli.main(["build-exclusion", "--reference", "sofa,cow", "--out", str(tmp_path / "x.json")]) == 0
        doc = json.loads((tmp_path / "x.json").read_text())
        assert {"couch", "cattle"} <= set(doc["excluded"])
        assert not set(doc["excluded"]) & set(doc["kept"])

    def test_train_and_evaluate(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps(mini_experiment()))
        assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "run")]) == 0
        args = ["evaluate-ar", "--config", str(tmp_path / "c.json"), "--checkpoint", str(tmp_path / "run" / "model.pt")]
        assert cli.main(args + ["--report", str(tmp_path / "r.json")]) == 0
        report = EvalReport.from_json((tmp_path / "r.json").read_text())
        assert report.macro_seen.k_values == (1, 10, 100)
        assert cli.main(["emit-report", f"mini={tmp_path / 'r.json'}", "--out", str(tmp_path / "rep")]) == 0
        assert (tmp_path / "rep" / "mini.json").exists() and (tmp_path / "rep" / "ar_curves.png").exists()

    def test_gen_shapes_and_downstream(self, tmp_path):
        out = tmp_path / "shapes"
        assert cli.main(["gen-shapes", "--out", str(out), "--num-images", "6", "--image-size", "64",
                         "--min-size", "10", "--max-size", "30", "--seed", "1"]) == 0
        (tmp_path / "c.json").write_text(json.dumps(mini_experiment(output_dir=str(tmp_path / "run"))))
        assert cli.main(["train", "--config", str(tmp_path / "c.json")]) == 0
        rc = cli.main(["eval-downstream", "--checkpoint", str(tmp_path / "run" / "model.pt"),
                       "--annotations", str(out / "annotations.json"), "--images", str(out / "images"),
                       "--m-grid", "1,2", "--report", str(tmp_path / "d.json")])
        assert rc == 0
        doc = json.loads((tmp_path / "d.json").read_text())
        assert doc["num_images"] == 6 and doc["gt_crop_accuracy"] == 1.0

    @pytest.mark.parametrize(
        "args",
        [
            ["train", "--config", "/nonexistent/c.yaml"],
            ["gen-shapes", "--out", "{tmp}", "--classes", "blob"],
        ],
    )
    def test_config_errors_exit_2(self, args, tmp_path, capsys):
        args = [a.replace("{tmp}", str(tmp_path)) for a in args]
        assert cli.main(args) == cli.EXIT_CONFIG
        assert "error" in capsys.readouterr().err

    def test_unknown_config_key_exits_2(self, tmp_path):
        doc = mini_experiment()
        doc["bogus"] = 1
        (tmp_path / "c.json").write_text(json.dumps(doc))
        assert cli.main(["train", "--config", str(tmp_path / "c.json")]) == cli.EXIT_CONFIG

    def test_data_errors_exit_3(self, tmp_path):
        index, pixels = generate_shapes(ShapesConfig(num_images=2, image_size=64, min_size=10, max_size=30))
        save_coco_json(index, tmp_path / "ann.json")
        save_images(pixels, index, tmp_path / "img")
        (tmp_path / "broken.json").write_text("{")
        (tmp_path / "c.json").write_text(json.dumps(mini_experiment()))
        missing_ckpt = ["eval-downstream", "--checkpoint", str(tmp_path / "none.pt"),
                        "--annotations", str(tmp_path / "ann.json"), "--images", str(tmp_path / "img")]
        assert cli.main(missing_ckpt) == cli.EXIT_DATA
        bad_doc = dict(mini_experiment(), train={"annotations": str(tmp_path / "broken.json"), "images": str(tmp_path)})
        (tmp_path / "bad.json").write_text(json.dumps(bad_doc))
        assert cli.main(["train", "--config", str(tmp_path / "bad.json")]) == cli.EXIT_DATA
        assert cli.main(["emit-report", str(tmp_path / "broken.json"), "--out", str(tmp_path / "r")]) == cli.EXIT_DATA
        assert cli.main(["build-exclusion", "--reference", f"@{tmp_path / 'absent.txt'}"]) == cli.EXIT_DATA
