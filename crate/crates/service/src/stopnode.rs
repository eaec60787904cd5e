//! Real-time stop display loop: poll the server socket, tick power, render.

use std::io::Write;
use std::thread;
use std::time::{Duration, Instant};

use smartbus_core::netproto::{Ack, Body, Channel, Envelope, SocketChannel, TransportError};
use smartbus_core::stopnode::{ApplyOutcome, DisplayState};

use crate::{now_ms, ServiceError};

#[derive(Debug, Clone)]
pub struct StopNodeOptions {
    pub server: String,
    pub stop_id: String,
    pub clock_skew_s: i64,
    /// Hourly state of charge; empty means always powered.
    pub soc_trace: Vec<f64>,
    /// Wall-clock length of one trace hour, shortened for demos.
    pub hour_ms: u64,
    pub frame_interval_ms: u64,
    /// Exit after this many rendered frames.
    pub max_frames: Option<u64>,
    /// Give up after this many failed connection attempts in a row.
    pub max_reconnects: u32,
}

impl StopNodeOptions {
    pub fn new(server: impl Into<String>, stop_id: impl Into<String>) -> Self {
        Self {
            server: server.into(),
            stop_id: stop_id.into(),
            clock_skew_s: 0,
            soc_trace: Vec::new(),
            hour_ms: 3_600_000,
            frame_interval_ms: 1_000,
            max_frames: None,
            max_reconnects: 30,
        }
    }
}

fn subscribe(opts: &StopNodeOptions) -> Result<SocketChannel, TransportError> {
    let mut ch = SocketChannel::connect(&opts.server)?;
    let hello = Envelope {
        seq: 0,
        sender: format!("stop:{}", opts.stop_id),
        ts: now_ms(),
        body: Body::Ack(Ack {
            sender: "server".into(),
            seq: 0,
        }),
    };
    ch.send(0, &hello)?;
    Ok(ch)
}

fn connect_with_retry(opts: &StopNodeOptions) -> Result<SocketChannel, ServiceError> {
    let mut failures = 0;
    loop {
        match subscribe(opts) {
            Ok(ch) => return Ok(ch),
            Err(TransportError::Disconnected { retry_after_ms, .. }) if failures < opts.max_reconnects => {
                failures += 1;
                thread::sleep(Duration::from_millis(retry_after_ms));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Runs until `max_frames` frames are written. Returns the final state.
pub fn run_stop_node(opts: &StopNodeOptions, out: &mut impl Write) -> Result<DisplayState, ServiceError> {
    let mut display = DisplayState::new(opts.clock_skew_s);
    let mut channel = connect_with_retry(opts)?;
    let node = format!("stop:{}", opts.stop_id);
    let started = Instant::now();
    let mut frames = 0;
    let mut next_frame = Instant::now();
    loop {
        match channel.poll(0) {
            Ok(envs) => {
                for env in envs {
                    match display.apply_broadcast(&env) {
                        Ok(ApplyOutcome::Unpowered) | Err(_) => {}
                        Ok(_) => {
                            if let Err(e) = channel.send(0, &env.ack(&node, now_ms(), 0)) {
                                eprintln!("{node}: {e}");
                            }
                        }
                    }
                }
            }
            Err(TransportError::Disconnected { reason, retry_after_ms }) => {
                eprintln!("{node}: disconnected ({reason}); reconnecting");
                thread::sleep(Duration::from_millis(retry_after_ms));
                channel = connect_with_retry(opts)?;
            }
            Err(e) => return Err(e.into()),
        }

        if !opts.soc_trace.is_empty() {
            let hour = (started.elapsed().as_millis() as u64 / opts.hour_ms.max(1)) as usize;
            let soc = opts
                .soc_trace
                .get(hour)
                .or(opts.soc_trace.last())
                .copied()
                .unwrap_or(1.0);
            if display.tick_power(soc).unwrap_or(false) {
                eprintln!("{node}: power {}", if display.powered { "on" } else { "off" });
            }
        }

        if Instant::now() >= next_frame {
            for line in display.render(now_ms()) {
                writeln!(out, "{line}")?;
            }
            writeln!(out)?;
            out.flush()?;
            frames += 1;
            next_frame += Duration::from_millis(opts.frame_interval_ms);
            if opts.max_frames.is_some_and(|m| frames >= m) {
                return Ok(display);
            }
        }
        thread::sleep(Duration::from_millis(10));
    }
}
