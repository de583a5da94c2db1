use std::net::SocketAddr;
use std::time::Duration;

use inlinethink_core::fixtures::{self, reward_matrix};
use inlinethink_core::interleave::{serialize, DelimiterScheme};
use inlinethink_core::reward::{combined_reward, RewardConfig};
use inlinethink_core::sandbox::{Sandbox, TestCase};
use inlinethink_service::{
    spawn, AppState, BatchItem, BatchRequest, BatchResponse, ConfigOverrides, ErrorBody, Health, ScoringRequest,
    ScoringResponse, ServiceConfig, SECRET_HEADER, VERSION,
};
use rand::Rng;
use reqwest::StatusCode;
use serde_json::json;

async fn start(cfg: ServiceConfig) -> (SocketAddr, AppState) {
    let state = AppState::new(cfg).unwrap();
    (spawn("127.0.0.1:0", state.clone()).await.unwrap(), state)
}

fn url(addr: SocketAddr, path: &str) -> String {
    format!("http://{addr}{path}")
}

fn request(id: impl Into<String>, completion: &str, tests: Vec<TestCase>) -> ScoringRequest {
    ScoringRequest {
        id: id.into(),
        prompt: "p".into(),
        completion: completion.into(),
        tests,
        config: ConfigOverrides::default(),
        structure_only: false,
    }
}

async fn score(client: &reqwest::Client, addr: SocketAddr, req: &ScoringRequest) -> ScoringResponse {
    let resp = client.post(url(addr, "/score")).json(req).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    resp.json().await.unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn health_on_fresh_service() {
    let (addr, _) = start(ServiceConfig { workers: 3, ..ServiceConfig::default() }).await;
    let h: Health = reqwest::get(url(addr, "/health")).await.unwrap().json().await.unwrap();
    assert_eq!(h, Health { status: "ok".into(), sandbox_workers_free: 3, version: VERSION.into() });
}

#[tokio::test(flavor = "multi_thread")]
async fn value_matrix_over_http() {
    let (addr, _) = start(ServiceConfig::default()).await;
    let client = reqwest::Client::new();
    let mut totals = Vec::new();
    for (i, case) in reward_matrix().into_iter().enumerate() {
        let r = score(&client, addr, &request(i.to_string(), &case.raw, case.tests)).await;
        assert_eq!((r.r_struct, r.r_correct), (case.r_struct, Some(case.r_correct)));
        assert_eq!(r.id, i.to_string());
        totals.push(r.total);
    }
    assert_eq!(totals, [0.0, 0.1, 1.0, 1.1]);
}

#[tokio::test(flavor = "multi_thread")]
async fn randomized_requests_match_library() {
    let (addr, _) = start(ServiceConfig::default()).await;
    let client = reqwest::Client::new();
    let sandbox = Sandbox::default();
    let matrix = reward_matrix();
    let scheme = DelimiterScheme::text_tags();
    let mut rng = fixtures::rng(99);
    for i in 0..100 {
        let (completion, tests) = if rng.random_bool(0.7) {
            let c = &matrix[rng.random_range(0..matrix.len())];
            (c.raw.clone(), c.tests.clone())
        } else {
            let seq = fixtures::random_sequence(&mut rng, &scheme);
            (serialize(&seq, &scheme).unwrap(), vec![TestCase::io("", "")])
        };
        let mut req = request(format!("r{i}"), &completion, tests);
        req.config.alpha = Some(rng.random_range(0.0..1.0));
        let remote = score(&client, addr, &req).await;
        let cfg = req.effective_config(&RewardConfig::default());
        let local = combined_reward(&req.completion, &req.tests, &cfg, &sandbox).unwrap();
        assert_eq!(remote.total.to_bits(), local.total.to_bits(), "{req:?}");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn structure_only_and_errors() {
    let (addr, _) = start(ServiceConfig { batch_cap: 8, ..ServiceConfig::default() }).await;
    let client = reqwest::Client::new();

    let mut req = request("s", &reward_matrix()[3].raw, Vec::new());
    req.structure_only = true;
    let r = score(&client, addr, &req).await;
    assert_eq!((r.r_struct, r.r_correct, r.total), (1, None, 0.1));
    assert!(r.verdicts.is_empty());

    let malformed = score(&client, addr, &{
        let mut m = request("m", "<think>p</think>x = <thinkanywhere>a</thinkanywhere>1</thinkanywhere>", Vec::new());
        m.structure_only = true;
        m
    })
    .await;
    assert_eq!(malformed.r_struct, 0);
    assert_eq!(malformed.violations, ["unmatched_tag"]);

    let status = |body: serde_json::Value, path: &'static str| {
        let client = client.clone();
        async move { client.post(url(addr, path)).json(&body).send().await.unwrap().status() }
    };
    assert_eq!(status(json!({"id": "x"}), "/score").await, StatusCode::BAD_REQUEST);
    assert_eq!(status(json!({"id": "x", "completion": "c", "tests": []}), "/score").await, StatusCode::BAD_REQUEST);
    assert_eq!(
        status(
            json!({"id": "x", "completion": "c", "tests": [], "config": {"alpha": -1.0}, "structure_only": true}),
            "/score"
        )
        .await,
        StatusCode::BAD_REQUEST
    );
    let raw = client.post(url(addr, "/score")).body("{not json").send().await.unwrap();
    assert_eq!(raw.status(), StatusCode::BAD_REQUEST);
    let body: ErrorBody = raw.json().await.unwrap();
    assert_eq!(body.error, "bad_request");

    let nine: Vec<_> =
        (0..9).map(|i| json!({"id": i.to_string(), "completion": "c", "structure_only": true})).collect();
    assert_eq!(status(json!({"requests": nine}), "/score_batch").await, StatusCode::PAYLOAD_TOO_LARGE);
    let dup = json!({"requests": [{"id": "a", "completion": "c"}, {"id": "a", "completion": "c"}]});
    assert_eq!(status(dup, "/score_batch").await, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn batch_isolates_bad_items() {
    let (addr, _) = start(ServiceConfig::default()).await;
    let client = reqwest::Client::new();
    let good = &reward_matrix()[3];
    let mut items: Vec<serde_json::Value> = (0..8)
        .map(|i| serde_json::to_value(request(format!("g{i}"), &good.raw, good.tests.clone())).unwrap())
        .collect();
    items[5] = json!({"id": "g5", "completion": 17});
    let resp: BatchResponse = client
        .post(url(addr, "/score_batch"))
        .json(&json!({"requests": items}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(resp.responses.len(), 8);
    for (i, item) in resp.responses.iter().enumerate() {
        match item {
            BatchItem::Scored(r) => {
                assert_ne!(i, 5);
                assert_eq!((r.id.as_str(), r.total), (format!("g{i}").as_str(), 1.1));
            }
            BatchItem::Failed(e) => {
                assert_eq!(i, 5);
                assert_eq!((e.id.as_deref(), e.error.as_str()), (Some("g5"), "bad_request"));
            }
        }
    }
    let empty: BatchResponse = client
        .post(url(addr, "/score_batch"))
        .json(&BatchRequest { requests: Vec::new() })
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(empty.responses.is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_clients_keep_order_and_bound() {
    let workers = 2;
    let (addr, state) = start(ServiceConfig { workers, ..ServiceConfig::default() }).await;
    let matrix = reward_matrix();
    let mut tasks = Vec::new();
    for client_id in 0..4 {
        let matrix = matrix.clone();
        tasks.push(tokio::spawn(async move {
            let client = reqwest::Client::new();
            for round in 0..3 {
                let requests: Vec<ScoringRequest> = (0..8)
                    .map(|i| {
                        let c = &matrix[(i + client_id + round) % matrix.len()];
                        request(format!("c{client_id}-r{round}-{i}"), &c.raw, c.tests.clone())
                    })
                    .collect();
                let expected: Vec<(String, f64)> = requests
                    .iter()
                    .zip((0..8).map(|i| &matrix[(i + client_id + round) % matrix.len()]))
                    .map(|(r, c)| (r.id.clone(), 0.1 * f64::from(c.r_struct) + f64::from(c.r_correct)))
                    .collect();
                let resp: BatchResponse = client
                    .post(url(addr, "/score_batch"))
                    .json(&BatchRequest { requests })
                    .send()
                    .await
                    .unwrap()
                    .json()
                    .await
                    .unwrap();
                let got: Vec<(String, f64)> = resp
                    .responses
                    .into_iter()
                    .map(|item| match item {
                        BatchItem::Scored(r) => (r.id, r.total),
                        BatchItem::Failed(e) => panic!("{e:?}"),
                    })
                    .collect();
                assert_eq!(got, expected);
            }
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    assert!(state.sandbox().pool().peak_in_flight() <= workers);
}

#[tokio::test(flavor = "multi_thread")]
async fn saturation_reports_busy_and_rejects() {
    let (addr, _) = start(ServiceConfig { workers: 1, queue_depth: 0, ..ServiceConfig::default() }).await;
    let client = reqwest::Client::new();
    let slow = request("slow", "import time\ntime.sleep(1.5)\nprint(1)\n", vec![TestCase::io("", "1")]);
    let background = {
        let client = client.clone();
        tokio::spawn(async move { client.post(url(addr, "/score")).json(&slow).send().await.unwrap().status() })
    };
    let mut busy = None;
    for _ in 0..50 {
        tokio::time::sleep(Duration::from_millis(20)).await;
        let h: Health = client.get(url(addr, "/health")).send().await.unwrap().json().await.unwrap();
        if h.status == "busy" {
            busy = Some(h);
            break;
        }
    }
    let busy = busy.expect("service never reported busy");
    assert_eq!(busy.sandbox_workers_free, 0);
    let rejected =
        client.post(url(addr, "/score")).json(&request("x", "print(1)", vec![TestCase::io("", "1")])).send().await;
    assert_eq!(rejected.unwrap().status(), StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(background.await.unwrap(), StatusCode::OK);
    let h: Health = client.get(url(addr, "/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(h.status, "ok");
}

#[tokio::test(flavor = "multi_thread")]
async fn shared_secret_and_log_sink() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("scores.jsonl");
    let cfg = ServiceConfig { secret: Some("s3cret".into()), log_sink: Some(log.clone()), ..ServiceConfig::default() };
    let (addr, _) = start(cfg).await;
    let client = reqwest::Client::new();
    let case = &reward_matrix()[3];
    let req = request("logged", &case.raw, case.tests.clone());
    let denied = client.post(url(addr, "/score")).json(&req).send().await.unwrap();
    assert_eq!(denied.status(), StatusCode::UNAUTHORIZED);
    let ok = client.post(url(addr, "/score")).header(SECRET_HEADER, "s3cret").json(&req).send().await.unwrap();
    assert_eq!(ok.status(), StatusCode::OK);
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!((lines[0]["id"].as_str(), lines[0]["total"].as_f64()), (Some("logged"), Some(1.1)));
}
