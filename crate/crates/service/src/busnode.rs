//! Real-time bus node: replays one simulated bus's outbound traffic against a
//! live server over HTTP.
//!
//! A bus's own behaviour never depends on server replies, so its envelope
//! stream is taken from a loss-free simulation of the scenario and paced on
//! the wall clock.

use std::time::Duration;

use serde::Serialize;
use smartbus_core::netproto::{self, Body, Envelope, RetransmitPolicy};
use smartbus_core::simkernel::{self, RunOptions, ScenarioConfig};
use tokio::time::{sleep_until, Instant};

use crate::ServiceError;

#[derive(Debug, Clone)]
pub struct BusNodeOptions {
    /// Base URL of the data server, e.g. `http://127.0.0.1:8080`.
    pub server_url: String,
    pub bus_id: String,
    /// Scenario seconds per wall-clock second.
    pub speedup: f64,
    pub retransmit: RetransmitPolicy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BusNodeSummary {
    pub sent: u64,
    pub acked: u64,
    pub attempts: u64,
    pub failed: u64,
}

/// Posts one envelope until the matching ack comes back or retries run out.
pub async fn deliver(
    client: &reqwest::Client,
    url: &str,
    env: &Envelope,
    policy: RetransmitPolicy,
    summary: &mut BusNodeSummary,
) -> bool {
    let bytes = netproto::encode(env);
    for attempt in 0..=policy.max_retries {
        if attempt > 0 {
            tokio::time::sleep(Duration::from_millis(policy.interval_ms)).await;
        }
        summary.attempts += 1;
        let Ok(resp) = client.post(url).body(bytes.clone()).send().await else {
            continue;
        };
        if !resp.status().is_success() {
            // A rejection is final; retrying cannot change it.
            if resp.status().is_client_error() {
                return false;
            }
            continue;
        }
        let Ok(body) = resp.bytes().await else { continue };
        if let Ok(Envelope { body: Body::Ack(a), .. }) = netproto::decode(&body) {
            if a.sender == env.sender && a.seq == env.seq {
                return true;
            }
        }
    }
    false
}

pub async fn run_bus_node(scenario: &ScenarioConfig, opts: &BusNodeOptions) -> Result<BusNodeSummary, ServiceError> {
    if !(opts.speedup.is_finite() && opts.speedup > 0.0) {
        return Err(ServiceError::Config(format!(
            "speedup must be positive, got {}",
            opts.speedup
        )));
    }
    let run = simkernel::run_with(scenario, &RunOptions::default())?;
    let Some(outbound) = run.outbound.get(&opts.bus_id) else {
        return Err(ServiceError::Config(format!("scenario has no bus {:?}", opts.bus_id)));
    };
    let client = reqwest::Client::new();
    let url = format!("{}/ingest", opts.server_url.trim_end_matches('/'));
    let start = Instant::now();
    let mut summary = BusNodeSummary::default();
    for (t_ms, env) in outbound {
        sleep_until(start + Duration::from_secs_f64(*t_ms as f64 / 1000.0 / opts.speedup)).await;
        summary.sent += 1;
        if deliver(&client, &url, env, opts.retransmit, &mut summary).await {
            summary.acked += 1;
        } else {
            summary.failed += 1;
            eprintln!("bus:{}: gave up on seq {}", opts.bus_id, env.seq);
        }
    }
    Ok(summary)
}
