import pytest

from emdistill.harness import load_config, train_teacher

MICRO_CONFIG = """\
task.kind=majority-token
task.vocab_size=8
task.seq_len=6
task.num_classes=2
task.train_size=32
task.eval_size=16
task.seed=3
teacher.num_layers=2
teacher.num_heads=2
teacher.hidden_size=8
teacher.ff_size=16
teacher.seed=3
student.num_layers=1
student.num_heads=2
student.hidden_size=8
student.ff_size=16
student.seed=5
beta=0.01
t=1.0
tau=1.0
learning_rate=0.05
batch_size=8
epochs=2
mode=full
seed=3
teacher_learning_rate=0.05
teacher_epochs=1
accuracy_floor=0.0
"""


@pytest.fixture(scope="session")
def micro_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "micro.txt"
    path.write_text(MICRO_CONFIG)
    return path


@pytest.fixture(scope="session")
def micro_teacher(micro_config_path, tmp_path_factory):
    """A (quickly, poorly) trained teacher checkpoint for the micro config."""
    out = tmp_path_factory.mktemp("teacher")
    config = load_config(micro_config_path)
    return train_teacher(config, out)
