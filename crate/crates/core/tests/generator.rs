use focalmix::volume::{crop_patch, generate_scan, read_scan, write_scan};
use focalmix::{Error, GenConfig};

#[test]
fn boxes_stay_inside_the_volume_over_100_scans() {
    let cfg = GenConfig::default();
    assert_eq!(cfg.volume_shape, [64, 64, 64]);
    assert_eq!(cfg.nodule_diameter_range, [4.0, 10.0]);
    let mut total = 0;
    for i in 0..100 {
        let scan = generate_scan(&cfg, i).unwrap();
        assert!((1..=3).contains(&scan.boxes.len()));
        for b in &scan.boxes {
            for c in b.center {
                assert!(c >= b.edge / 2.0 && c <= 64.0 - b.edge / 2.0, "{b:?} in scan {i}");
            }
            assert!((4.0..=10.0).contains(&b.edge));
        }
        total += scan.boxes.len();
    }
    assert!(total > 100);
}

#[test]
fn nodules_are_brighter_than_their_surroundings() {
    let cfg = GenConfig::default();
    for i in 0..10 {
        let scan = generate_scan(&cfg, i).unwrap();
        let v = scan.volume.data();
        for b in &scan.boxes {
            let c = b.center.map(|x| x.floor() as usize);
            let r = (b.edge / 2.0).ceil() as usize + 3;
            let mut shell = (0.0, 0);
            for z in c[0].saturating_sub(r)..(c[0] + r).min(64) {
                for y in c[1].saturating_sub(r)..(c[1] + r).min(64) {
                    for x in c[2].saturating_sub(r)..(c[2] + r).min(64) {
                        let d = ((z as f64 + 0.5 - b.center[0]).powi(2)
                            + (y as f64 + 0.5 - b.center[1]).powi(2)
                            + (x as f64 + 0.5 - b.center[2]).powi(2))
                        .sqrt();
                        if d > b.edge / 2.0 + 1.5 && d <= r as f64 {
                            shell.0 += v[[z, y, x]] as f64;
                            shell.1 += 1;
                        }
                    }
                }
            }
            let background = shell.0 / shell.1 as f64;
            assert!(v[c] as f64 > background, "scan {i}, nodule {b:?}");
        }
    }
}

#[test]
fn disk_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let scan = generate_scan(
        &GenConfig {
            volume_shape: [16, 16, 24],
            nodule_diameter_range: [3.0, 5.0],
            ..GenConfig::default()
        },
        3,
    )
    .unwrap();
    let path = write_scan(&scan, dir.path()).unwrap();
    assert_eq!(read_scan(&path).unwrap(), scan);

    let vol = path.with_extension("vol");
    let mut bytes = std::fs::read(&vol).unwrap();
    bytes.truncate(bytes.len() - 4 * 16);
    std::fs::write(&vol, &bytes).unwrap();
    assert!(matches!(read_scan(&path), Err(Error::Load { .. })));
}

#[test]
fn crop_beyond_the_border_is_zero_padded() {
    let scan = generate_scan(&GenConfig::default(), 0).unwrap();
    let crop = crop_patch(&scan, [16, 16, 64], [32, 32, 32], 4).unwrap();
    let d = crop.volume.data();
    for z in 0..32 {
        for y in 0..32 {
            for x in 16..32 {
                assert_eq!(d[[z, y, x]], 0.0);
            }
            assert_eq!(d[[z, y, 15]], scan.volume.data()[[z, y, 63]]);
        }
    }
}
