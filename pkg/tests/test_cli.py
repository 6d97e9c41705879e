import numpy as np
import pytest

from sketchnocs import cli
from sketchnocs.config import parse_config
from sketchnocs.diffusion import DenoiserSpec, denoiser_from_table, init_denoiser
from sketchnocs.tensor import load_checkpoint

TINY_CFG = """
resolution = 16
ring_views = 4
ring_elevations = 0.35
categories = chair
objects_per_category = 3
test_fraction = 0.34
train_views = 2
sve_epochs = 2
sve_feature_dim = 8
timesteps = 10
beta_end = 0.1
base_width = 8
time_dim = 8
shape_dim = 8
prompt_dim = 8
prompt_vocab = 32
stage1_steps = 2
stage2_steps = 3
checkpoint_every = 2
batch_size = 2
ddim_steps = 5
eval_view_counts = 1,2
emd_points = 32
sve_batch = 8
previews = false
seed = 3
"""


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


@pytest.fixture(scope="module")
def generated(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("gen")
    assert cli.main(["gen-data", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_config, generated):
    out = tmp_path_factory.mktemp("train")
    code = cli.main([
        "train", "--config", str(tiny_config),
        "--data", str(generated / "dataset"), "--out", str(out),
    ])
    assert code == 0
    return out


def test_gen_data_outputs(generated):
    data = generated / "dataset"
    assert (data / "all.tsv").exists()
    assert (data / "train.tsv").exists() and (data / "test.tsv").exists()
    assert (generated / "config.used.cfg").exists()
    rasters = sorted((data / "rasters").glob("*.nmap"))
    assert len(rasters) == 12  # 3 objects x 4 views


def test_gen_data_bad_key(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("resolutoin = 32\n")
    code = cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 1


def test_gen_data_rerun_byte_identical(tmp_path, tiny_config, generated):
    out2 = tmp_path / "gen2"
    assert cli.main(["gen-data", "--config", str(tiny_config), "--out", str(out2)]) == 0
    a = (generated / "dataset" / "all.tsv").read_bytes()
    b = (out2 / "dataset" / "all.tsv").read_bytes()
    assert a == b
    name = sorted((generated / "dataset" / "rasters").glob("*.nmap"))[0].name
    assert (generated / "dataset" / "rasters" / name).read_bytes() == \
        (out2 / "dataset" / "rasters" / name).read_bytes()


def test_lock_file_blocks_concurrent_use(tmp_path, tiny_config):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").touch()
    code = cli.main(["gen-data", "--config", str(tiny_config), "--out", str(out)])
    assert code == 2


def test_train_outputs(trained, tiny_config):
    assert (trained / "sve.ckpt").exists()
    assert (trained / "stage1.ckpt").exists()
    assert (trained / "stage2.ckpt").exists()
    text = (trained / "loss.csv").read_text().splitlines()
    assert text[0] == "stage,step,total,mvldm,l1,perc"
    assert len(text) == 1 + 2 + 3  # header + stage1 + stage2 rows


def test_stage1_checkpoint_has_init_base_weights(trained, tiny_config):
    cfg = parse_config(tiny_config)
    init = init_denoiser(DenoiserSpec.from_config(cfg), cfg.arch_hash(), cfg.seed)
    stage1 = denoiser_from_table(load_checkpoint(trained / "stage1.ckpt"),
                                 expect_arch_hash=cfg.arch_hash())
    for name in init.base_names():
        np.testing.assert_array_equal(stage1.tensors[name].data, init.tensors[name].data)


def test_train_resume_after_completion_is_noop(trained, tiny_config, generated):
    code = cli.main([
        "train", "--config", str(tiny_config),
        "--data", str(generated / "dataset"), "--out", str(trained), "--resume",
    ])
    assert code == 0


def test_reconstruct_and_determinism(tmp_path, tiny_config, generated, trained):
    sketches = sorted((generated / "dataset" / "sketches").glob("*.pgm"))[:2]
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        code = cli.main([
            "reconstruct", "--config", str(tiny_config), "--out", str(out),
            "--checkpoint", str(trained / "stage2.ckpt"), "--sve", str(trained / "sve.ckpt"),
            "--sketches", *[str(s) for s in sketches], "--prompt", "chair",
        ])
        assert code == 0
        assert (out / "cloud.ply").exists() and (out / "cloud.xyz").exists()
        assert (out / "view00.nmap").exists() and (out / "view01.nmap").exists()
        outs.append((out / "cloud.ply").read_bytes())
    assert outs[0] == outs[1]


def test_reconstruct_label_count_mismatch(tmp_path, tiny_config, generated, trained):
    sketches = sorted((generated / "dataset" / "sketches").glob("*.pgm"))[:2]
    code = cli.main([
        "reconstruct", "--config", str(tiny_config), "--out", str(tmp_path / "r"),
        "--checkpoint", str(trained / "stage2.ckpt"), "--sve", str(trained / "sve.ckpt"),
        "--sketches", *[str(s) for s in sketches], "--labels", "0",
    ])
    assert code == 1


def test_sample_writes_frames(tmp_path, tiny_config, generated, trained):
    sketch = sorted((generated / "dataset" / "sketches").glob("*.pgm"))[0]
    out = tmp_path / "s"
    code = cli.main([
        "sample", "--config", str(tiny_config), "--out", str(out),
        "--checkpoint", str(trained / "stage2.ckpt"), "--sve", str(trained / "sve.ckpt"),
        "--sketches", str(sketch), "--steps", "3",
    ])
    assert code == 0
    assert (out / "view00.nmap").exists()


def test_checkpoint_config_mismatch_rejected(tmp_path, tiny_config, generated, trained):
    other = tmp_path / "other.cfg"
    other.write_text(TINY_CFG.replace("base_width = 8", "base_width = 16"))
    sketch = sorted((generated / "dataset" / "sketches").glob("*.pgm"))[0]
    code = cli.main([
        "sample", "--config", str(other), "--out", str(tmp_path / "m"),
        "--checkpoint", str(trained / "stage2.ckpt"), "--sve", str(trained / "sve.ckpt"),
        "--sketches", str(sketch),
    ])
    assert code == 2


def test_eval_outputs(tmp_path, tiny_config, generated, trained):
    out = tmp_path / "eval"
    code = cli.main([
        "eval", "--config", str(tiny_config), "--out", str(out),
        "--data", str(generated / "dataset"),
        "--checkpoint", str(trained / "stage2.ckpt"), "--sve", str(trained / "sve.ckpt"),
    ])
    assert code == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "object_id,category,views,cd,emd,iou"
    body = [line.split(",") for line in lines[1:]]
    object_rows = [r for r in body if r[0] != "mean"]
    mean_rows = [r for r in body if r[0] == "mean"]
    assert len(object_rows) == 1 * 2  # one test object x view counts (1,2)
    assert len(mean_rows) == 2
    # view-count column ordering matches config order
    assert [r[2] for r in object_rows] == ["1", "2"]


def test_missing_manifest_is_io_error(tmp_path, tiny_config):
    code = cli.main([
        "train", "--config", str(tiny_config),
        "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "t"),
    ])
    assert code == 2


def test_usage_error_exit_code():
    assert cli.main(["no-such-command"]) == 1
