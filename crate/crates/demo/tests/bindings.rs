use lamda_demo::{allocation_json, count_json, presets_json, schedule_json};
use serde_json::Value;

fn parse(s: Result<String, String>) -> Value {
    serde_json::from_str(&s.unwrap()).unwrap()
}

#[test]
fn schedule_trace_matches_effective_count() {
    let v = parse(schedule_json(32, 4096, 0.3, 1000, "linear"));
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1000);
    assert_eq!(rows[0], 32);
    assert_eq!(rows[150], 16);
    assert!(rows[300..].iter().all(|r| r == 0));
    let (trace, eff) = (v["trace_average"].as_f64().unwrap(), v["effective"].as_f64().unwrap());
    assert!((trace - eff).abs() / eff < 1e-3);
    assert!(schedule_json(4, 8, 0.3, 10, "cubic").is_err());
    assert!(schedule_json(4, 8, 1.5, 10, "floor").is_err());
}

#[test]
fn allocation_meets_target() {
    let v = parse(allocation_json(1, 2, 16, 0.4, &[2, 4, 6], 4, false));
    let modules = v["modules"].as_array().unwrap();
    assert_eq!(modules.len(), 12);
    assert_eq!(v["mean_rank"], 4.0);
    for m in modules {
        let e = m["energy"].as_array().unwrap();
        assert_eq!(e.len(), 17);
        assert!((e[16].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
    // the lowest-nu module gets the largest rank unless reversed
    let lowest = |v: &Value| {
        let ms = v["modules"].as_array().unwrap();
        ms.iter().min_by(|a, b| a["nu"].as_f64().partial_cmp(&b["nu"].as_f64()).unwrap()).unwrap()["rank"].clone()
    };
    assert_eq!(lowest(&v), 6);
    assert_eq!(lowest(&parse(allocation_json(1, 2, 16, 0.4, &[2, 4, 6], 4, true))), 2);
    assert!(allocation_json(1, 1, 4, 0.1, &[2, 8], 5, false).is_err());
}

#[test]
fn count_reports() {
    let v = parse(count_json("llama2-7b", "lora", 16, 0.0));
    assert_eq!(v["trainable_params"], 28_049_408);
    let v = parse(count_json("llama2-7b", "lamda", 32, 0.3));
    assert!((v["effective_params"].as_f64().unwrap() - 4.37e6).abs() / 4.37e6 < 5e-3);
    assert!(count_json("llama2-7b", "lamda++", 32, 0.3).is_err());
    assert!(count_json("nope", "lora", 8, 0.0).is_err());
    let names = parse(presets_json());
    assert!(names.as_array().unwrap().iter().any(|n| n == "deberta-v3-base"));
}
