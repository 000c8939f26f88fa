import numpy as np
import pytest
import torch

from coresleep.backbone import UnimodalModel
from coresleep.cli import main
from coresleep.config import LABELS, ModelConfig
from coresleep.datapipe import SynthSpec, inject_noise, preprocess_recording, synth_generate
from coresleep.evaluation import (
    RunManifest,
    aggregate_reports,
    dataset_digest,
    evaluate,
    export_hypnogram,
    parse_kv,
    predict_logits,
    read_hypnogram,
)
from coresleep.errors import ConfigError
from coresleep.fusion import UnimodalWrapper, build_model
from coresleep.metrics import accuracy, cohen_kappa, confusion_matrix, macro_f1


@pytest.fixture(scope="module")
def seqs():
    return [preprocess_recording(r) for r in synth_generate(SynthSpec(seed=21), 3, 50)]


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig.reduced(), seed=0)


def test_both_condition_matches_direct_logits(model, seqs):
    rep = evaluate(model, seqs, ["both"])
    preds = []
    with torch.no_grad():
        for s in seqs:
            for a in range(0, len(s), 21):
                x = {m: torch.from_numpy(s.features[m][a : a + 21][None]).double() for m in ("eeg", "eog")}
                preds.append(model.eval()(**x)["logits_mm"].argmax(-1).ravel().numpy())
    cm = confusion_matrix(np.concatenate([s.labels for s in seqs]), np.concatenate(preds))
    assert np.array_equal(rep.results["both"].cm, cm)
    assert rep.results["both"].metrics()["accuracy"] == accuracy(cm)


def test_eeg_only_matches_standalone_unimodal(model, seqs):
    standalone = UnimodalWrapper(model.cfg).double()
    standalone.net.load_state_dict(model.unimodal_model("eeg").state_dict())
    a = evaluate(model, seqs, ["eeg_only"]).results["eeg_only"].cm
    b = evaluate(standalone, seqs, ["eeg_only"]).results["eeg_only"].cm
    assert np.array_equal(a, b)


def test_noisy_subset_empty_and_selected(model, seqs):
    rep = evaluate(model, seqs, ["noisy_subset"], noisy_ids=[])
    r = rep.results["noisy_subset"]
    assert r.n_windows == 0 and r.note == "no patients selected"
    assert "no patients selected" in rep.to_text()
    rep = evaluate(model, seqs, ["noisy_subset"], noisy_ids=[seqs[1].patient_id])
    assert rep.results["noisy_subset"].n_windows == len(seqs[1])
    with pytest.raises(ConfigError):
        evaluate(model, seqs, ["noisy_subset"])
    with pytest.raises(ConfigError):
        evaluate(model, seqs, ["sideways"])


def test_missing_modality_condition_is_skipped_with_warning(model, seqs):
    eeg_only = [s.without("eog") for s in seqs]
    with pytest.warns(UserWarning):
        rep = evaluate(model, eeg_only, ["both", "eeg_only"])
    assert rep.results["both"].n_windows == 0 and rep.results["both"].note.startswith("skipped")
    assert rep.results["eeg_only"].n_windows == sum(map(len, seqs))


def test_evaluate_is_side_effect_free(model, seqs):
    model.train()
    before = [p.detach().clone() for p in model.parameters()]
    state = model.dropout_generator.get_state()
    evaluate(model, seqs, ["both", "eeg_only", "eog_only"])
    assert model.training and torch.equal(state, model.dropout_generator.get_state())
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))
    model.eval()


def test_kv_report_recomputes_exactly(model, seqs):
    rep = evaluate(model, seqs)
    kv = parse_kv(rep.to_kv())
    for cond in ("both", "eeg_only", "eog_only"):
        cm = np.array([int(c) for c in kv[f"{cond}.cm"].split(",")]).reshape(5, 5)
        assert float(kv[f"{cond}.accuracy"]) == accuracy(cm)
        assert float(kv[f"{cond}.kappa"]) == cohen_kappa(cm)
        assert float(kv[f"{cond}.macro_f1"]) == macro_f1(cm)
        assert int(kv[f"{cond}.windows"]) == cm.sum()
    agg = aggregate_reports([rep, rep])
    assert "repeats: 2" in agg and "± 0.0000" in agg


def test_hypnogram_rows_labels_and_determinism(model, seqs, tmp_path):
    p1 = export_hypnogram(model, seqs[0], tmp_path / "a.txt", manifest="abc")
    p2 = export_hypnogram(model, seqs[0], tmp_path / "b.txt", manifest="abc")
    rows = read_hypnogram(p1)
    assert len(rows) == len(seqs[0]) and p1.read_text() == p2.read_text()
    assert p1.read_text().startswith("# manifest = abc\nindex, true, pred_mm, pred_eeg, pred_eog\n")
    assert all(r[1] in LABELS and r[2] in LABELS for r in rows)
    assert [r[3] for r in rows] == [LABELS[i] for i in predict_logits(model, seqs[0], ("eeg",)).argmax(-1).tolist()]


def test_manifest_digest_depends_on_inputs(seqs, tmp_path):
    m = RunManifest({"a": 1}, dataset_digest(seqs), "code", 0)
    assert RunManifest({"a": 1}, dataset_digest(seqs), "code", 0).digest == m.digest
    assert RunManifest({"a": 1}, dataset_digest(seqs[:2]), "code", 0).digest != m.digest
    assert m.write(tmp_path).name == f"manifest-{m.digest}.json"


# ------------------------------------------------------------------ command line

TINY = """
[model]
d_model = 8
n_heads = 2
d_k = 4
d_u = 4
d_ff = 16
inner_layers = 1
outer_layers = 1
precision = float32

[training]
base_lr = 0.001
warmup_steps = 1
validate_every = 2
patience_steps = 100
max_steps = 3
batch_size = 4

[data]
n_patients = 12
windows_per_patient = 60
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    (out / "tiny.ini").write_text(TINY)
    cfg = str(out / "tiny.ini")
    assert main(["synth", "--config", cfg, "--out", str(out), "--noise-patients", "12"]) == 0
    assert main(["preprocess", "--out", str(out)]) == 0
    assert main(["train", "--config", cfg, "--out", str(out), "--seed", "1", "--repeat", "2"]) == 0
    return out, cfg


def test_cli_pipeline_outputs(workdir, capsys):
    out, cfg = workdir
    assert (out / "checkpoint-s1.crsc").exists() and (out / "checkpoint-s2.crsc").exists()
    assert main(["eval", "--config", cfg, "--out", str(out), "--seed", "1", "--raw", "raw",
                 "--conditions", "both,eeg_only,eog_only,noisy_subset"]) == 0
    kv = parse_kv((out / "eval-s1.kv").read_text())
    assert kv["manifest"] and int(kv["noisy_subset.patients"]) > 0
    assert (out / "eval-s1.txt").read_text().startswith(f"manifest: {kv['manifest']}")
    assert (out / f"manifest-{kv['manifest']}.json").exists() or list(out.glob("manifest-*.json"))
    assert (out / "train-s1.log").read_text().startswith("# manifest = ")


def test_cli_seed_repetition_is_identical(workdir):
    out, cfg = workdir
    runs = []
    for _ in range(2):
        assert main(["eval", "--config", cfg, "--out", str(out), "--seed", "2"]) == 0
        runs.append((out / "eval-s2.kv").read_text())
    assert runs[0] == runs[1]


def test_cli_repeat_aggregates(workdir):
    out, cfg = workdir
    assert main(["eval", "--config", cfg, "--out", str(out), "--seed", "1", "--repeat", "2"]) == 0
    assert "repeats: 2" in (out / "eval-aggregate.txt").read_text()


def test_cli_detect_noise_and_hypnogram(workdir):
    out, cfg = workdir
    assert main(["detect-noise", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "noise_report.txt").read_text().splitlines()
    assert len(lines) == 12 and all(l.endswith(", 1") for l in lines)
    assert main(["export-hypnogram", "--config", cfg, "--out", str(out), "--seed", "1", "--patient", "P0003"]) == 0
    assert (out / "hypnogram-P0003.txt").read_text().startswith("# manifest = ")


def test_cli_errors(workdir, tmp_path, capsys):
    out, cfg = workdir
    assert main(["eval", "--config", cfg, "--out", str(out), "--seed", "9"]) == 1
    assert "not found" in capsys.readouterr().err
    assert main(["eval", "--out", str(tmp_path)]) == 1
    assert main(["frobnicate"]) == 2
    assert main(["eval", "--bogus"]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nwidth = 3\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["eval", "--config", cfg, "--out", str(out), "--seed", "1", "--conditions", "nope"]) == 1
