use panova_web::{box_summary, mixture_summary, tree_report};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

fn num(v: &Value, key: &str) -> f64 {
    v[key].as_f64().unwrap()
}

#[test]
fn mixture_parts_add_up() {
    let r = parse(&mixture_summary(&[0.66, 0.34], &[10.2, 12.9], &[1.5, 5.1], 0.05).unwrap());
    assert!((num(&r, "between") + num(&r, "within") - num(&r, "variance")).abs() < 1e-12);
    assert!((num(&r, "within") - (0.66 * 1.5 + 0.34 * 5.1)).abs() < 1e-12);
    assert!(num(&r, "lower") < num(&r, "mean") && num(&r, "mean") < num(&r, "upper"));
}

#[test]
fn single_normal_interval_is_the_usual_one() {
    let r = parse(&mixture_summary(&[1.0], &[0.0], &[1.0], 0.05).unwrap());
    assert!((num(&r, "upper") - 1.959964).abs() < 1e-4);
    assert!((num(&r, "lower") + 1.959964).abs() < 1e-4);
}

#[test]
fn mismatched_lengths_are_rejected() {
    assert!(mixture_summary(&[0.5, 0.5], &[0.0], &[1.0, 1.0], 0.05).is_err());
    assert!(mixture_summary(&[0.6, 0.6], &[0.0, 1.0], &[1.0, 1.0], 0.05).is_err());
}

#[test]
fn page_example_tree_decomposes() {
    let page = include_str!("../www/index.html");
    let start = page.find("<textarea id=\"tj\" rows=\"9\">").unwrap();
    let body = &page[start..];
    let body = &body[body.find('>').unwrap() + 1..body.find("</textarea>").unwrap()];
    let r = parse(&tree_report(body).unwrap());
    let terms = r["terms"].as_array().unwrap();
    assert_eq!(terms.len(), 3);
    let sum: f64 = terms.iter().map(|t| num(t, "variance")).sum();
    assert!((sum - num(&r, "flattened_total")).abs() < 1e-12);
}

#[test]
fn bad_tree_json_is_an_error() {
    assert!(tree_report("{\"factors\": 3}").is_err());
}

#[test]
fn box_matches_the_first_two_moments() {
    let l = [0.9, 0.4, 0.1];
    let r = parse(&box_summary(&l).unwrap());
    let s1: f64 = l.iter().sum();
    let s2: f64 = l.iter().map(|x| x * x).sum();
    assert!((num(&r, "mean") - s1).abs() < 1e-12);
    assert!((num(&r, "variance") - 2.0 * s2).abs() < 1e-12);
    assert!(box_summary(&[-1.0]).is_err());
}
