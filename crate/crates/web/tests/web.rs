use mapo_web::{scene_view, semantic_curve, variance_curve, zoom_view};
use serde_json::Value;

fn parse(text: String) -> Value {
    serde_json::from_str(&text).unwrap()
}

#[test]
fn scene_has_one_target_and_a_question() {
    let v = parse(scene_view(5, 8).unwrap());
    assert_eq!(v["cells"].as_array().unwrap().len(), 64);
    let target = v["target_cell"].as_u64().unwrap() as usize;
    let class = v["cells"][target]["class"].as_str().unwrap();
    assert!(v["question"].as_str().unwrap().ends_with(&format!("{class}?")));
    assert!(scene_view(5, 9).is_err());
}

#[test]
fn zooming_on_the_target_with_its_full_label_scores_one() {
    let s = parse(scene_view(5, 8).unwrap());
    let t = s["target_cell"].as_u64().unwrap() as f64;
    let (row, col) = ((t / 8.0).floor(), t % 8.0);
    let cell = &s["cells"][t as usize];
    let label = format!("{} {} {}", cell["size"].as_str().unwrap(), cell["color"].as_str().unwrap(), cell["class"].as_str().unwrap());
    let z = parse(zoom_view(5, 8, col / 8.0, row / 8.0, (col + 1.0) / 8.0, (row + 1.0) / 8.0, &label).unwrap());
    assert!((z["z"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(z["covered_cells"].as_array().unwrap().len(), 1);
    assert!(z["tool_call"].as_str().unwrap().starts_with("<tool_call>"));

    let blank = parse(zoom_view(5, 8, 0.0, 0.0, 0.01, 0.01, "dog").unwrap());
    assert_eq!(blank["blank"], Value::Bool(true));
    assert!(zoom_view(5, 8, 0.5, 0.0, 0.1, 1.0, "dog").is_err());
}

#[test]
fn semantic_curve_matches_worked_value_and_sum_grows() {
    let v = parse(semantic_curve(0.8, 0.95, 6).unwrap());
    let pts = v.as_array().unwrap();
    assert_eq!(pts.len(), 6);
    assert!((pts[0]["discounted"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    assert!(pts.windows(2).all(|w| w[1]["discounted"].as_f64() < w[0]["discounted"].as_f64()));
    assert!(pts.windows(2).all(|w| w[1]["sum"].as_f64() > w[0]["sum"].as_f64()));
    assert!(semantic_curve(0.8, 0.95, 0).is_err());
    assert!(semantic_curve(1.5, 0.95, 3).is_err());
}

#[test]
fn variance_curve_tracks_the_analytic_line() {
    let v = parse(variance_curve(8, 1.0, 20_000, 1).unwrap());
    let pts = v.as_array().unwrap();
    assert_eq!(pts.len(), 20);
    assert!((pts[0]["analytic"].as_f64().unwrap() - 0.875).abs() < 1e-12);
    for p in pts {
        let (e, a) = (p["empirical"].as_f64().unwrap(), p["analytic"].as_f64().unwrap());
        assert!((e - a).abs() / a < 0.05);
    }
    assert!(variance_curve(8, 1.0, 1_000_000, 1).is_err());
}
