"""End-to-end runs of every subcommand through main(argv)."""

import csv
import json
import os

import pytest

from dynmask.cli import main


VERIFY_CFG = {"forward_instances": 3, "grad_instances": 1,
              "mask_rows": 40, "skip_instances": 2}

TRAIN_CFG = {
    "spec": {"vocab_size": 48, "num_pairs": 4, "num_queries": 4, "seq_len": 32,
             "num_train": 32, "num_test": 16, "seed": 5},
    "model": {"vocab_size": 48, "d_model": 16, "n_heads": 2, "n_layers": 1,
              "keep_per_row": 4, "mlp_hidden": 32, "seed": 5},
    "train": {"epochs": 2, "lr": 0.001, "batch_size": 16},
}


def _write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def test_verify_passes_and_is_byte_stable(tmp_path):
    cfg = _write(tmp_path, "v.json", VERIFY_CFG)
    outs = []
    for i, threads in enumerate((1, 2)):
        out = str(tmp_path / f"r{i}.json")
        rc = main(["verify", "--seed", "3", "--threads", str(threads),
                   "--config", cfg, "--out", out])
        assert rc == 0
        outs.append(open(out, "rb").read())
    assert outs[0] == outs[1]
    report = json.loads(outs[0])
    assert report["passed"] and set(report["suites"]) == {"forward", "grad", "mask", "skip"}


@pytest.mark.parametrize("fault", ["forward-sign", "mask-bit", "grad-scale", "skip-epsilon"])
def test_verify_fault_injection_fails(tmp_path, fault):
    cfg = _write(tmp_path, "v.json", VERIFY_CFG)
    out = str(tmp_path / "r.json")
    rc = main(["verify", "--seed", "3", "--config", cfg,
               "--fault-inject", fault, "--out", out])
    assert rc == 1
    assert not json.loads(open(out).read())["passed"]


def test_bench_writes_csv_and_json(tmp_path):
    cfg = _write(tmp_path, "b.json", {"cases": [
        {"name": "t1", "q_len": 64, "k_len": 64, "head_dim": 8, "keep_per_row": 8,
         "n_heads": 1, "block_q": 8, "block_k": 8, "repeats": 2, "warmup": 1,
         "threads": 1, "seed": 0},
    ]})
    prefix = str(tmp_path / "bench")
    assert main(["bench", "--config", cfg, "--out", prefix]) == 0
    payload = json.loads(open(prefix + ".json").read())
    assert payload["schema_version"] == 1
    assert payload["results"][0]["valid"] is True
    rows = list(csv.DictReader(open(prefix + ".csv")))
    assert len(rows) == 1 and rows[0]["name"] == "t1"


def test_train_eval_maskdump_pipeline(tmp_path):
    cfg = _write(tmp_path, "t.json", TRAIN_CFG)
    run_dir = str(tmp_path / "run")
    assert main(["mqar-train", "--config", cfg, "--out", run_dir]) == 0
    assert os.path.exists(os.path.join(run_dir, "checkpoint.bin"))
    lines = open(os.path.join(run_dir, "train_log.jsonl")).read().splitlines()
    assert json.loads(lines[0])["record"] == "header"
    assert len(lines) == 1 + TRAIN_CFG["train"]["epochs"]

    ckpt = os.path.join(run_dir, "checkpoint.bin")
    eval_out = str(tmp_path / "eval.json")
    assert main(["mqar-eval", "--checkpoint", ckpt, "--out", eval_out]) == 0
    ev = json.loads(open(eval_out).read())
    assert 0.0 <= ev["test"]["accuracy"] <= 1.0
    # spec travels inside the checkpoint, so eval needs no config
    assert ev["spec"]["num_pairs"] == 4

    dump_dir = str(tmp_path / "masks")
    assert main(["mask-dump", "--checkpoint", ckpt, "--out", dump_dir]) == 0
    meta = json.loads(open(os.path.join(dump_dir, "meta.json")).read())
    assert meta["n_heads"] == 2 and len(meta["files"]) == 2  # 1 layer x 2 heads
    rows = list(csv.reader(open(os.path.join(dump_dir, meta["files"][0]))))
    L = TRAIN_CFG["spec"]["seq_len"]
    assert len(rows) == L and len(rows[0]) == L
    # beyond-diagonal cells are empty strings, kept cells parse as floats
    assert rows[0][1] == "" and rows[5][10] == ""
    kept = [c for c in rows[L - 1] if c != ""]
    assert len(kept) == TRAIN_CFG["model"]["keep_per_row"]
    float(kept[0])


def test_train_log_byte_identical_across_runs_and_threads(tmp_path):
    cfg = _write(tmp_path, "t.json", TRAIN_CFG)
    blobs = []
    for i, threads in enumerate(("1", "4")):
        run_dir = str(tmp_path / f"run{i}")
        assert main(["mqar-train", "--config", cfg, "--threads", threads,
                     "--out", run_dir]) == 0
        blobs.append((
            open(os.path.join(run_dir, "train_log.jsonl"), "rb").read(),
            open(os.path.join(run_dir, "checkpoint.bin"), "rb").read(),
            open(os.path.join(run_dir, "result.json"), "rb").read(),
        ))
    assert blobs[0] == blobs[1]


def test_train_rejects_f32():
    assert main(["mqar-train", "--dtype", "f32"]) == 2


def test_mask_dump_random_model_with_probe(tmp_path):
    cfg = _write(tmp_path, "m.json", {"model": TRAIN_CFG["model"]})
    dump_dir = str(tmp_path / "masks")
    rc = main(["mask-dump", "--config", cfg, "--probe", "1,2,3,4,5,6,7,8",
               "--out", dump_dir])
    assert rc == 0
    meta = json.loads(open(os.path.join(dump_dir, "meta.json")).read())
    assert meta["probe_tokens"] == [1, 2, 3, 4, 5, 6, 7, 8]


def test_mask_dump_rejects_out_of_vocab_probe(tmp_path):
    cfg = _write(tmp_path, "m.json", {"model": TRAIN_CFG["model"]})
    rc = main(["mask-dump", "--config", cfg, "--probe", "999",
               "--out", str(tmp_path / "x")])
    assert rc == 2
