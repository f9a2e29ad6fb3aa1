use dance_cli::formats::{read_ply, read_xyz, write_ply, write_xyz, PlyEncoding};
use dance_core::Point3;
use proptest::prelude::*;

fn f32_bits(points: &[Point3]) -> Vec<[u32; 3]> {
    points
        .iter()
        .map(|p| [(p[0] as f32).to_bits(), (p[1] as f32).to_bits(), (p[2] as f32).to_bits()])
        .collect()
}

#[test]
fn xyz_origin_line() {
    assert_eq!(read_xyz("0 0 0\n".as_bytes()).unwrap(), vec![[0.0; 3]]);
}

#[test]
fn xyz_skips_blank_lines_and_keeps_order() {
    let pts = read_xyz("1 2 3\n\n  -4\t5.5 6e-1  \r\n".as_bytes()).unwrap();
    assert_eq!(pts, vec![[1.0, 2.0, 3.0], [-4.0, 5.5, 0.6f32 as f64]]);
}

#[test]
fn xyz_errors_carry_line_numbers() {
    let e = read_xyz("0 0 0\n1 2\n".as_bytes()).unwrap_err();
    assert_eq!(e.line, 2);
    assert!(e.message.contains("3 coordinates"), "{e}");
    let e = read_xyz("0 0 0\n\n1 x 2\n".as_bytes()).unwrap_err();
    assert_eq!(e.line, 3);
    let e = read_xyz("nan 0 0\n".as_bytes()).unwrap_err();
    assert_eq!(e.line, 1);
}

#[test]
fn ply_extra_color_properties_are_skipped() {
    let text = "ply\n\
        format ascii 1.0\n\
        comment hand written\n\
        element vertex 2\n\
        property float x\n\
        property uchar red\n\
        property float y\n\
        property uchar green\n\
        property uchar blue\n\
        property float z\n\
        element face 1\n\
        property list uchar int vertex_indices\n\
        end_header\n\
        0.5 255 -1 0 12 2\n\
        1 0 2 3 4 -0.25\n\
        3 0 1 1\n";
    let pts = read_ply(text.as_bytes()).unwrap();
    assert_eq!(pts, vec![[0.5, -1.0, 2.0], [1.0, 2.0, -0.25]]);
}

#[test]
fn binary_ply_with_extra_properties_and_preceding_element() {
    let mut bytes = b"ply\nformat binary_little_endian 1.0\n\
        element camera 1\nproperty list uchar float params\n\
        element vertex 2\nproperty double x\nproperty double y\nproperty double z\n\
        property uchar red\nproperty ushort flags\nend_header\n"
        .to_vec();
    bytes.push(2);
    bytes.extend_from_slice(&1.5f32.to_le_bytes());
    bytes.extend_from_slice(&2.5f32.to_le_bytes());
    for (p, red, flags) in [([0.1f64, 0.2, 0.3], 9u8, 7u16), ([-1.0, 0.0, 4.0], 0, 65535)] {
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.push(red);
        bytes.extend_from_slice(&flags.to_le_bytes());
    }
    let pts = read_ply(&bytes).unwrap();
    assert_eq!(pts, vec![[0.1, 0.2, 0.3], [-1.0, 0.0, 4.0]]);
}

#[test]
fn ply_header_errors_name_the_line() {
    let cases: [(&str, usize, &str); 6] = [
        ("plx\n", 1, "magic"),
        ("ply\nformat binary_big_endian 1.0\nend_header\n", 2, "encoding"),
        ("ply\nformat ascii 1.0\nproperty float x\nend_header\n", 3, "before any element"),
        ("ply\nformat ascii 1.0\nelement vertex 1\nproperty half x\nend_header\n", 4, "unknown type"),
        ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n", 5, "end_header"),
        (
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n",
            6,
            "`z`",
        ),
    ];
    for (text, line, needle) in cases {
        let e = read_ply(text.as_bytes()).unwrap_err();
        assert_eq!(e.line, line, "{text:?}: {e}");
        assert!(e.message.contains(needle), "{text:?}: {e}");
    }
}

#[test]
fn ply_row_errors_name_the_line() {
    let head = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
    let e = read_ply(format!("{head}0 0 0\n1 1\n2 2 2\n").as_bytes()).unwrap_err();
    assert_eq!(e.line, 9);
    let e = read_ply(format!("{head}0 0 0\n1 1 1 1\n2 2 2\n").as_bytes()).unwrap_err();
    assert_eq!(e.line, 9);
    let e = read_ply(format!("{head}0 0 0\n").as_bytes()).unwrap_err();
    assert_eq!(e.line, 9);
    assert!(e.message.contains("vertex 1 of 3"), "{e}");

    let mut bin = Vec::new();
    write_ply(&mut bin, &[[1.0, 2.0, 3.0]; 4], PlyEncoding::BinaryLittleEndian).unwrap();
    bin.truncate(bin.len() - 5);
    let e = read_ply(&bin).unwrap_err();
    assert!(e.message.contains("vertex 3 of 4"), "{e}");
}

#[test]
fn written_header_declares_only_xyz() {
    let mut buf = Vec::new();
    write_ply(&mut buf, &[[1.0, 2.0, 3.0]], PlyEncoding::Ascii).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(
        text,
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n"
    );
}

#[test]
fn empty_cloud_round_trips_in_ply() {
    let mut buf = Vec::new();
    write_ply(&mut buf, &[], PlyEncoding::BinaryLittleEndian).unwrap();
    assert!(read_ply(&buf).unwrap().is_empty());
}

fn coord() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6f64..1e6,
        -1.0f64..1.0,
        any::<f32>()
            .prop_filter("finite", |v| v.is_finite())
            .prop_map(f64::from),
    ]
}

proptest! {
    #[test]
    fn round_trips_are_bit_identical_at_f32(
        pts in prop::collection::vec([coord(), coord(), coord()], 0..200)
    ) {
        let want = f32_bits(&pts);
        for enc in [PlyEncoding::BinaryLittleEndian, PlyEncoding::Ascii] {
            let mut buf = Vec::new();
            write_ply(&mut buf, &pts, enc).unwrap();
            prop_assert_eq!(f32_bits(&read_ply(&buf).unwrap()), want.clone());
        }
        let mut buf = Vec::new();
        write_xyz(&mut buf, &pts).unwrap();
        prop_assert_eq!(f32_bits(&read_xyz(buf.as_slice()).unwrap()), want);
    }
}
