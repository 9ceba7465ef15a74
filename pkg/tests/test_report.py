import pytest

from proto_mp import cli
from proto_mp.report import ReportSchemaError, check_report, strip_timestamp, write_report

from conftest import REPO


@pytest.fixture
def train_report(tmp_path):
    cli.main(["train", "--config", str(REPO / "configs" / "toy.ini"), "--out", str(tmp_path)])
    return tmp_path / "train_report.ini"


def edit(path, old, new):
    text = path.read_text()
    assert old in text
    path.write_text(text.replace(old, new, 1))


def test_accepts_real_report(train_report):
    assert check_report(train_report) == "train"


@pytest.mark.parametrize("old,new", [
    ("[aggregate]", "[totals]"),
    ("test_acc = ", "test_accuracy = "),
    ("n_seeds = 1", "n_seeds = 2"),
    ("format_version = 1", "format_version = 9"),
    ("command = train", "command = deploy"),
])
def test_rejects_edited(train_report, old, new):
    edit(train_report, old, new)
    with pytest.raises(ReportSchemaError):
        check_report(train_report)


def test_rejects_non_numeric(train_report):
    text = train_report.read_text()
    line = next(ln for ln in text.splitlines() if ln.startswith("test_acc = "))
    edit(train_report, line, "test_acc = high")
    with pytest.raises(ReportSchemaError, match="numeric"):
        check_report(train_report)


def test_rejects_garbage(tmp_path):
    p = tmp_path / "r.ini"
    p.write_text("not a report\n")
    with pytest.raises(ReportSchemaError):
        check_report(p)


def test_ablate_length_mismatch(tmp_path):
    cli.main(["ablate", "--config", str(REPO / "configs" / "toy.ini"), "--seeds", "0,1",
              "--out", str(tmp_path)])
    p = tmp_path / "ablation_report.ini"
    edit(p, "seeds = 0,1", "seeds = 0,1,2")
    with pytest.raises(ReportSchemaError, match="length"):
        check_report(p)


def test_strip_timestamp(tmp_path):
    a = write_report(tmp_path / "a.ini", "analyze", {"x": {"k": 1}}, "2020-01-01T00:00:00 elapsed_s=1")
    b = write_report(tmp_path / "b.ini", "analyze", {"x": {"k": 1}}, "2021-05-05T00:00:00 elapsed_s=9")
    ta, tb = a.read_text(), b.read_text()
    assert ta != tb
    assert strip_timestamp(ta) == strip_timestamp(tb)
    assert len(ta.splitlines()) - len(strip_timestamp(ta).splitlines()) == 1
