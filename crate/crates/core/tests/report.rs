use dipstop::data::{write_report, EvalResult};

fn result(camera: &str, k: usize) -> EvalResult {
    EvalResult {
        id: format!("{camera}_{k}"),
        camera_tag: Some(camera.to_string()),
        psnr: 30.0 + k as f64 * 0.25,
        best_psnr: 31.0 + k as f64 * 0.5,
        chosen_iteration: 100 * (k + 1),
        no_peak_declared: k == 2,
    }
}

#[test]
fn rows_are_grouped_by_camera_then_averaged() {
    let cameras = ["canon", "nikon", "sony", "iphone", "pixel"];
    // Interleaved so grouping has to reorder.
    let results: Vec<EvalResult> = (0..3).flat_map(|k| cameras.iter().map(move |c| result(c, k))).collect();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("report.csv");
    write_report(&results, &path).unwrap();

    let mut reader = csv::Reader::from_path(&path).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["camera", "image", "psnr_db", "best_psnr_db", "chosen_iteration", "no_peak_declared"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 16);
    let order: Vec<&str> = rows[..15].iter().map(|r| &r[0]).collect();
    let expected: Vec<&str> = cameras.iter().flat_map(|c| [*c; 3]).collect();
    assert_eq!(order, expected);
    assert_eq!(&rows[2][1], "canon_2");
    assert_eq!(&rows[2][5], "true");

    // Average: k in {0,1,2} per camera, so psnr mean is 30.25 and best mean 31.5.
    let avg = &rows[15];
    assert_eq!(&avg[0], "average");
    assert_eq!(&avg[2], "30.2500");
    assert_eq!(&avg[3], "31.5000");
}

#[test]
fn empty_report_has_na_average() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("report.csv");
    write_report(&[], &path).unwrap();
    let mut reader = csv::Reader::from_path(&path).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "average");
    assert_eq!(&rows[0][2], "NA");
}
