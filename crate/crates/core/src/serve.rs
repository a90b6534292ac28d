//! Live session: one trial stepped frame by frame, streamed as protocol
//! frames to a TCP client and a browser client, with operator commands
//! accepted from either.

use std::io::{ErrorKind, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc::{self, Receiver, Sender, SyncSender, TryRecvError, TrySendError};
use std::thread;
use std::time::{Duration, Instant};

use crate::controller::{OperatorCommand, Phase};
use crate::dsp::DepthAxis;
use crate::error::{Error, Result};
use crate::gateway;
use crate::harness::{LogEntry, TickReport, Trial, TrialConfig, TrialResult};
use crate::segnet::NetParams;
use crate::tracker::LayerEstimate;
use crate::wire::{
    encode, CommandMsg, Frame, Message, MScanMsg, Opcode, StatusMsg, StreamDecoder, TraceMsg, FLAG_CORRECTION,
    VALID_DM, VALID_EPI,
};

const POLL: Duration = Duration::from_millis(5);
/// Frames buffered per client before the oldest are dropped.
const QUEUE: usize = 64;

pub const STATUS_OK: u16 = 0;
pub const STATUS_REJECTED: u16 = 1;
pub const STATUS_DONE: u16 = 2;

/// Console display settings; they do not affect the trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplaySettings {
    pub time_range_s: f32,
    pub dist_range_um: f32,
    pub auto_range: bool,
}

impl Default for DisplaySettings {
    fn default() -> Self {
        Self { time_range_s: 5.0, dist_range_um: 3000.0, auto_range: true }
    }
}

/// Operator command for a protocol command, or `None` for display settings.
pub fn operator_command(cmd: &CommandMsg, display: &mut DisplaySettings) -> Option<OperatorCommand> {
    let v = cmd.operand as f64;
    Some(match cmd.opcode {
        Opcode::StepDown => OperatorCommand::StepDown(v),
        Opcode::StepUp => OperatorCommand::StepUp(v),
        Opcode::RotateOn => OperatorCommand::RotateOn,
        Opcode::RotateOff => OperatorCommand::RotateOff,
        Opcode::SetTarget => OperatorCommand::SetTarget(v),
        Opcode::SetStep => OperatorCommand::SetStep(v),
        Opcode::StartAuto => OperatorCommand::StartAuto,
        Opcode::Pause => OperatorCommand::Pause,
        Opcode::Retract => OperatorCommand::Retract,
        Opcode::SetTimeRange => {
            display.time_range_s = cmd.operand;
            return None;
        }
        Opcode::SetDistRange => {
            display.dist_range_um = cmd.operand;
            return None;
        }
        Opcode::AutoRange => {
            display.auto_range = cmd.operand != 0.0;
            return None;
        }
    })
}

pub fn trace_msg(est: &LayerEstimate) -> TraceMsg {
    let f = |v: Option<f64>| v.map_or(f32::NAN, |v| v as f32);
    TraceMsg {
        epi_um: f(est.epi_um),
        dm_um: f(est.dm_um),
        needle_um: est.needle_tip_um as f32,
        validity: (u8::from(est.valid_epi) * VALID_EPI) | (u8::from(est.valid_dm) * VALID_DM),
        frame_seq: est.frame_seq as u32,
    }
}

/// Sequence numbering and timestamps for outgoing frames.
struct Outbox {
    seq: u32,
    start: Instant,
    clients: Vec<SyncSender<Vec<u8>>>,
    sent: u64,
}

impl Outbox {
    fn send(&mut self, flags: u8, message: Message) -> Result<()> {
        let frame = Frame { flags, seq: self.seq, timestamp_us: self.start.elapsed().as_micros() as u64, message };
        self.seq = self.seq.wrapping_add(1);
        let bytes = encode(&frame)?;
        for c in &self.clients {
            match c.try_send(bytes.clone()) {
                Ok(()) | Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {}
            }
        }
        self.sent += 1;
        Ok(())
    }
}

fn publish(out: &mut Outbox, report: &TickReport, trial: &Trial, status: (u16, String)) -> Result<()> {
    let flags = if report.axis.correction_active { FLAG_CORRECTION } else { 0 };
    if let Some(scan) = &report.scan {
        out.send(flags, Message::MScan(MScanMsg::from_scan(scan, report.axis.dz_air, report.axis.n_s)))?;
    }
    out.send(flags, Message::Trace(trace_msg(&report.estimate)))?;
    let c = trial.controller();
    out.send(
        flags,
        Message::Status(StatusMsg {
            phase: c.phase().code(),
            travel_um: c.travel_um() as f32,
            error_code: status.0,
            error_text: status.1,
        }),
    )
}

/// Plain TCP peer: frames out, commands in, one client at a time.
fn tcp_peer(listener: TcpListener, outgoing: Receiver<Vec<u8>>, incoming: Sender<Frame>) -> Result<()> {
    listener.set_nonblocking(true)?;
    let mut chunk = vec![0u8; 4096];
    loop {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                stream.set_read_timeout(Some(POLL))?;
                let mut dec = StreamDecoder::new();
                'client: loop {
                    loop {
                        match outgoing.try_recv() {
                            Ok(bytes) => {
                                if stream.write_all(&bytes).is_err() {
                                    break 'client;
                                }
                            }
                            Err(TryRecvError::Empty) => break,
                            Err(TryRecvError::Disconnected) => return Ok(()),
                        }
                    }
                    match stream.read(&mut chunk) {
                        Ok(0) => break,
                        Ok(n) => {
                            dec.push(&chunk[..n]);
                            while let Some(d) = dec.next_frame() {
                                if incoming.send(d.frame).is_err() {
                                    return Ok(());
                                }
                            }
                        }
                        Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                        Err(_) => break,
                    }
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => loop {
                match outgoing.try_recv() {
                    Ok(_) => {}
                    Err(TryRecvError::Empty) => {
                        thread::sleep(POLL);
                        break;
                    }
                    Err(TryRecvError::Disconnected) => return Ok(()),
                }
            },
            Err(e) => return Err(e.into()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// Pace frames at the controller cycle period instead of free-running.
    pub realtime: bool,
    /// Stop after this many frames even if the trial is still running.
    pub max_ticks: Option<u64>,
    /// Wait up to this long for a first client before starting.
    pub wait_for_client: Option<Duration>,
    /// Frames stay on screen after the trial ends for this long.
    pub linger: Duration,
}

#[derive(Debug, Clone)]
pub struct ServeSummary {
    pub ticks: u64,
    pub frames_sent: u64,
    pub commands_received: u64,
    pub display: DisplaySettings,
    pub result: Option<TrialResult>,
}

/// Run one trial as a live session. Either listener may be absent.
pub fn serve(
    cfg: TrialConfig,
    net: Option<NetParams<f32>>,
    tcp: Option<TcpListener>,
    ws: Option<TcpListener>,
    opts: &ServeOptions,
) -> Result<ServeSummary> {
    let mut trial = Trial::with_net(cfg, net)?;
    trial.render_scans = true;
    trial.release_operator();
    let period = Duration::from_secs_f64(trial.controller().config.cycle_period_s);
    let (in_tx, in_rx) = mpsc::channel::<Frame>();
    let mut out = Outbox { seq: 0, start: Instant::now(), clients: Vec::new(), sent: 0 };
    let mut workers = Vec::new();
    if let Some(l) = tcp {
        let (tx, rx) = mpsc::sync_channel(QUEUE);
        out.clients.push(tx);
        let inc = in_tx.clone();
        workers.push(thread::spawn(move || tcp_peer(l, rx, inc)));
    }
    if let Some(l) = ws {
        let (tx, rx) = mpsc::sync_channel(QUEUE);
        out.clients.push(tx);
        let inc = in_tx.clone();
        workers.push(thread::spawn(move || gateway::run(l, rx, inc).map(|_| ())));
    }
    drop(in_tx);

    if let Some(wait) = opts.wait_for_client {
        // the first client announces itself with any frame; a STATUS ping
        // lets it know the session is up
        let deadline = Instant::now() + wait;
        let idle = StatusMsg { phase: Phase::Attached.code(), travel_um: 0.0, error_code: STATUS_OK, error_text: "waiting".into() };
        while Instant::now() < deadline {
            out.send(0, Message::Status(idle.clone()))?;
            thread::sleep(Duration::from_millis(50));
        }
    }

    let mut display = DisplaySettings::default();
    let mut commands_received = 0u64;
    let mut ticks = 0u64;
    while !trial.is_done() && opts.max_ticks.is_none_or(|m| ticks < m) {
        let started = Instant::now();
        let mut ops = Vec::new();
        while let Ok(frame) = in_rx.try_recv() {
            if let Message::Command(cmd) = frame.message {
                commands_received += 1;
                if let Some(op) = operator_command(&cmd, &mut display) {
                    ops.push(op);
                }
            }
        }
        let log_len = trial.log().len();
        let report = trial.step(&ops)?;
        ticks += 1;
        let rejected = trial.log()[log_len..].iter().find_map(|e| match e {
            LogEntry::Rejected { reason, .. } => Some(reason.clone()),
            _ => None,
        });
        let status = match (rejected, trial.result()) {
            (Some(reason), _) => (STATUS_REJECTED, reason),
            (None, Some(r)) => (STATUS_DONE, format!("final gap {:.1} um", r.final_gap_um)),
            (None, None) => (STATUS_OK, String::new()),
        };
        publish(&mut out, &report, &trial, status)?;
        if opts.realtime {
            if let Some(rest) = period.checked_sub(started.elapsed()) {
                thread::sleep(rest);
            }
        }
    }
    if !opts.linger.is_zero() {
        thread::sleep(opts.linger);
    }
    let frames_sent = out.sent;
    drop(out);
    for w in workers {
        w.join().map_err(|_| Error::Aborted("client thread panicked".into()))??;
    }
    Ok(ServeSummary { ticks, frames_sent, commands_received, display, result: trial.result().cloned() })
}

/// Depth axis carried by an MSCAN frame.
pub fn axis_of(msg: &MScanMsg, flags: u8) -> DepthAxis {
    DepthAxis {
        dz_air: msg.dz_air as f64,
        n_s: msg.n_s as f64,
        correction_active: flags & FLAG_CORRECTION != 0,
        ..DepthAxis::default()
    }
}
