import numpy as np
import pytest

from core.data_handler import Box
from core.errors import DataError, LabelError
from core.labels import format_voc_xml, format_yolo_txt, load_label_file, parse_voc_xml, parse_yolo_txt


def voc(objects: str, size: str = "<size><width>64</width><height>48</height><depth>1</depth></size>") -> bytes:
    return f"<annotation><filename>f.pgm</filename>{size}{objects}</annotation>".encode()


def obj(name="target", xmin=10, ymin=20, xmax=13, ymax=23):
    return (
        f"<object><name>{name}</name><bndbox><xmin>{xmin}</xmin><ymin>{ymin}</ymin>"
        f"<xmax>{xmax}</xmax><ymax>{ymax}</ymax></bndbox></object>"
    )


def test_voc_boxes_are_converted_to_zero_based_half_open():
    annotation = parse_voc_xml(voc(obj()))
    assert annotation.filename == "f.pgm"
    assert (annotation.width, annotation.height) == (64, 48)
    assert annotation.boxes == [Box(0, 9, 19, 13, 23)]


def test_voc_class_lookup():
    annotation = parse_voc_xml(voc(obj("plane") + obj("2") + obj("bird")), class_names=("target", "plane"))
    assert [b.class_id for b in annotation.boxes] == [1, 2]


@pytest.mark.parametrize(
    "payload,field",
    [
        (voc(obj(xmin=14)), "object[0]/bndbox/xmax"),
        (voc(obj(ymin=30)), "object[0]/bndbox/ymax"),
        (voc(obj(xmax=70)), "object[0]/bndbox"),
        (voc(obj(xmin=0)), "object[0]/bndbox"),
        (voc("<object><name>target</name></object>"), "object[0]/bndbox"),
        (voc(obj(xmin="abc")), "object[0]/bndbox/xmin"),
        (b"<notes/>", "annotation"),
    ],
)
def test_voc_defects_name_the_field(payload, field):
    with pytest.raises(LabelError) as excinfo:
        parse_voc_xml(payload)
    assert excinfo.value.field == field


def test_malformed_xml_is_a_label_error():
    with pytest.raises(LabelError):
        parse_voc_xml(b"<annotation><object>")


def test_voc_writer_output_parses_back():
    boxes = [Box(0, 9, 19, 13, 23), Box(3, 0, 0, 64, 48)]
    annotation = parse_voc_xml(format_voc_xml(boxes, "f.pgm", 64, 48))
    assert annotation.boxes == boxes
    assert b"<xmin>10</xmin>" in format_voc_xml(boxes[:1], "f.pgm", 64, 48)


def test_yolo_line_to_pixel_box():
    (box,) = parse_yolo_txt(b"0 0.5 0.5 0.1 0.1\n", 100, 100)
    assert box.corners == pytest.approx((45.0, 45.0, 55.0, 55.0))


def test_yolo_clips_to_image_and_skips_blank_lines():
    boxes = parse_yolo_txt(b"\n1 0.02 0.5 0.1 0.2\n\n", 100, 50)
    assert len(boxes) == 1
    assert boxes[0].class_id == 1
    assert boxes[0].x1 == 0.0
    assert boxes[0].corners[1:] == pytest.approx((20.0, 7.0, 30.0))


@pytest.mark.parametrize(
    "line,field",
    [
        (b"0 0.5 0.5 0.1\n", None),
        (b"x 0.5 0.5 0.1 0.1\n", "class"),
        (b"-1 0.5 0.5 0.1 0.1\n", "class"),
        (b"0 1.5 0.5 0.1 0.1\n", "cx"),
        (b"0 0.5 0.5 0.0 0.1\n", "w"),
        (b"0 0.5 nan 0.1 0.1\n", "cy"),
    ],
)
def test_yolo_defects_carry_line_and_field(line, field):
    with pytest.raises(LabelError) as excinfo:
        parse_yolo_txt(b"0 0.5 0.5 0.1 0.1\n" + line, 10, 10)
    assert excinfo.value.line == 2
    assert excinfo.value.field == field


def test_yolo_writer():
    data = format_yolo_txt([Box(0, 45, 45, 55, 55)], 100, 100)
    assert data == b"0 0.500000 0.500000 0.100000 0.100000\n"


def test_label_files(tmp_path):
    xml = tmp_path / "a.xml"
    xml.write_bytes(voc(obj()))
    assert load_label_file(xml, 64, 48) == [Box(0, 9, 19, 13, 23)]
    with pytest.raises(LabelError) as excinfo:
        load_label_file(xml, 32, 32)
    assert "a.xml" in str(excinfo.value)
    other = tmp_path / "a.json"
    other.write_text("{}", encoding="utf-8")
    with pytest.raises(DataError):
        load_label_file(other, 64, 48)
    with pytest.raises(DataError):
        load_label_file(tmp_path / "missing.txt", 64, 48)


def mutants(seed_bytes: bytes, count: int, seed: int):
    """Byte-level corruptions: flips, insertions, deletions, truncations and splices."""
    rng = np.random.default_rng(seed)
    alphabet = np.frombuffer(b"0123456789-.e<>/ \n\t#xnaP5\xff\x00", dtype=np.uint8)
    for _ in range(count):
        data = bytearray(seed_bytes)
        for _ in range(int(rng.integers(1, 6))):
            op = int(rng.integers(0, 5))
            at = int(rng.integers(0, len(data) + 1))
            if op == 0 and data:
                data[min(at, len(data) - 1)] = int(rng.integers(0, 256))
            elif op == 1:
                data[at:at] = bytes([int(rng.choice(alphabet))]) * int(rng.integers(1, 4))
            elif op == 2 and data:
                del data[at : at + int(rng.integers(1, 8))]
            elif op == 3:
                data = data[:at]
            else:
                end = int(rng.integers(at, len(data) + 1))
                data[at:at] = data[at:end]
        yield bytes(data)


def test_voc_numeric_class_names_that_are_not_ascii_integers():
    annotation = parse_voc_xml(voc(obj("²") + obj("٣") + obj("1")))
    assert [b.class_id for b in annotation.boxes] == [1]
    with pytest.raises(LabelError) as excinfo:
        parse_voc_xml(voc(obj("9" * 5000)))
    assert excinfo.value.field == "object[0]/name"


def test_voc_box_that_collapses_after_conversion_names_the_field():
    payload = voc(obj(xmin="1e300", xmax="1e300", ymin=1, ymax=2), size="")
    with pytest.raises(LabelError) as excinfo:
        parse_voc_xml(payload)
    assert excinfo.value.field == "object[0]/bndbox"


def test_voc_parser_only_raises_label_errors_on_corrupt_input():
    seed_bytes = voc(obj() + obj("plane", 1, 1, 64, 48))
    for data in mutants(seed_bytes, 600, seed=11):
        try:
            parse_voc_xml(data, class_names=("target", "plane"))
        except LabelError:
            pass
        except Exception as exc:
            pytest.fail(f"{type(exc).__name__} on {data!r}: {exc}")


def test_yolo_parser_only_raises_label_errors_on_corrupt_input():
    seed_bytes = b"0 0.5 0.5 0.1 0.1\n1 0.020000 0.5 0.1 0.2\n\n3 1 1 1 1\n"
    for data in mutants(seed_bytes, 600, seed=12):
        try:
            boxes = parse_yolo_txt(data, 100, 50)
        except LabelError:
            continue
        except Exception as exc:
            pytest.fail(f"{type(exc).__name__} on {data!r}: {exc}")
        for box in boxes:
            assert 0.0 <= box.x1 < box.x2 <= 100.0
            assert 0.0 <= box.y1 < box.y2 <= 50.0
