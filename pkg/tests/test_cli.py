import json

import pytest

from ctrmcap.cli import main
from ctrmcap.data import read_dataset
from ctrmcap.training import load_checkpoint

MODEL = ["--set", "d_model=16", "--set", "n_heads=2", "--set", "n_trl_layers=1", "--set", "n_dec_layers=1",
         "--set", "ffn_dim=24", "--set", "batch_size=4"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def dataset(tmp_path, capsys):
    path = tmp_path / "d.jsonl"
    assert run(capsys, "gen-data", "--out", str(path), "--n-samples", "8", "--seed", "2",
               "--set", "d_v=6", "--set", "n_event_types=5")[0] == 0
    return path


def test_gen_data_is_seed_deterministic(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, out, err = run(capsys, "gen-data", "--out", str(tmp_path / name), "--n-samples", "20", "--seed", "5")
        assert code == 0 and out.startswith("samples=20 ")
        assert "effective config" in err and '"seed": 5' in err
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    run(capsys, "gen-data", "--out", str(tmp_path / "c"), "--n-samples", "20", "--seed", "6")
    assert (tmp_path / "c").read_bytes() != outs[0]


def test_config_errors_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--out", str(tmp_path / "x"), "--n-samples", "0")
    assert code == 2 and "n_samples must be a positive integer" in err
    code, _, err = run(capsys, "gen-data", "--out", str(tmp_path / "x"), "--set", "colour=3")
    assert code == 2 and "colour" in err
    assert run(capsys, "no-such-command")[0] == 2
    code, _, err = run(capsys, "eval")
    assert code == 2 and "--corpus" in err


def test_missing_inputs_exit_1(tmp_path, capsys):
    code, _, err = run(capsys, "caption", "--checkpoint", str(tmp_path / "none.ckpt"),
                       "--data", str(tmp_path / "none.jsonl"))
    assert code == 1 and "error: " in err and "No such file" in err


def test_train_then_caption_reproduces_the_caption(tmp_path, capsys, dataset):
    ckpt = tmp_path / "m.ckpt"
    code, out, _ = run(capsys, "train", "--data", str(dataset), "--out", str(ckpt), *MODEL,
                       "--set", "epochs=250", "--set", "batch_size=8", "--set", "learning_rate=0.005",
                       "--set", "d_model=24")
    assert code == 0 and json.loads(out)["loss_log"][-1]["epoch"] == 250
    code, out, _ = run(capsys, "caption", "--checkpoint", str(ckpt), "--data", str(dataset), "--index", "1")
    assert code == 0
    lines = out.splitlines()
    sample = read_dataset(dataset)[1]
    assert lines[0].split() == list(sample.words)
    tokens = [line.split("\t")[0] for line in lines[1:]]
    # one line per generated token, <bos> is given rather than generated
    assert tokens == list(sample.caption[1:])
    assert all(float(line.split("\t")[1]) <= 0.0 for line in lines[1:])


def test_zero_learning_rate_leaves_evaluation_unchanged(tmp_path, capsys, dataset):
    init = tmp_path / "init.ckpt"
    run(capsys, "train", "--data", str(dataset), "--out", str(init), *MODEL, "--set", "epochs=1")
    same = tmp_path / "same.ckpt"
    assert run(capsys, "train", "--data", str(dataset), "--out", str(same), "--init", str(init), *MODEL,
               "--set", "stage=finetune", "--set", "learning_rate=0", "--set", "epochs=2")[0] == 0
    assert load_checkpoint(same).params.keys() == load_checkpoint(init).params.keys()
    reports = []
    for ckpt in (init, same):
        code, out, _ = run(capsys, "eval", "--checkpoint", str(ckpt), "--data", str(dataset))
        assert code == 0
        reports.append(json.loads(out))
    assert reports[0] == reports[1]


def test_pipeline_resume_gives_identical_report(tmp_path, capsys, dataset):
    config = tmp_path / "p.json"
    config.write_text(json.dumps({"common": {"d_model": 16, "n_heads": 2, "n_trl_layers": 1, "n_dec_layers": 1,
                                             "ffn_dim": 24, "batch_size": 4},
                                  "stages": [{"stage": "pretrain", "epochs": 2}, {"stage": "finetune", "epochs": 2}]}))
    base = ["pipeline", "--config", str(config), "--data", str(dataset), "--eval-data", str(dataset)]
    code, straight, _ = run(capsys, *base, "--set", "stages.1.loss_weights.lambda1=0.2")
    assert code == 0 and json.loads(straight)["status"] == "complete"
    resume = base + ["--set", "stages.1.loss_weights.lambda1=0.2", "--checkpoint-dir", str(tmp_path / "ck")]
    code, out, _ = run(capsys, *resume, "--stop-after-epochs", "3")
    assert code == 0 and json.loads(out)["status"] == "interrupted"
    code, out, _ = run(capsys, *resume)
    assert code == 0 and out == straight
    assert json.loads(out)["stages"][1]["config"]["loss_weights"]["lambda1"] == 0.2


def test_pipeline_rejects_misordered_stages(tmp_path, capsys, dataset):
    config = tmp_path / "p.json"
    config.write_text(json.dumps({"stages": [{"stage": "finetune"}, {"stage": "pretrain"}]}))
    code, _, err = run(capsys, "pipeline", "--config", str(config), "--data", str(dataset))
    assert code == 2 and "order" in err


def test_eval_corpus(capsys, fixtures_dir):
    code, out, _ = run(capsys, "eval", "--corpus", str(fixtures_dir / "golden_corpus.jsonl"))
    frozen = json.loads((fixtures_dir / "golden_metrics.json").read_text())
    report = json.loads(out)
    assert code == 0
    for k in ("bleu4", "rougeL", "cider"):
        assert report[k] == pytest.approx(frozen[k], abs=1e-12)


def test_grad_check_passes_and_catches_a_corrupted_primitive(capsys):
    code, out, _ = run(capsys, "grad-check", "--set", "seeds=2")
    assert code == 0 and out.strip().splitlines()[-1].startswith("PASS overall")
    code, out, err = run(capsys, "grad-check", "--set", "seeds=2", "--corrupt", "log")
    assert code == 1 and "FAIL log" in out and "log" in err
