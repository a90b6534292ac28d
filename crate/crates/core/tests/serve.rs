use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use autodalk::controller::{ArmMode, OperatorCommand, Phase};
use autodalk::gateway::Client;
use autodalk::harness::TrialConfig;
use autodalk::serve::{operator_command, serve, DisplaySettings, ServeOptions, STATUS_REJECTED};
use autodalk::wire::{self, decode, encode, CommandMsg, Endpoint, Frame, FrameReader, Message, Opcode, FLAG_CORRECTION};

#[test]
fn display_opcodes_never_reach_the_controller() {
    let mut d = DisplaySettings::default();
    for op in Opcode::ALL {
        let operand = op.operand_range().map_or(0.0, |r| r.1);
        let cmd = CommandMsg::new(op, operand).unwrap();
        let mapped = operator_command(&cmd, &mut d);
        let display_only = matches!(op, Opcode::SetTimeRange | Opcode::SetDistRange | Opcode::AutoRange);
        assert_eq!(mapped.is_none(), display_only, "{op:?}");
    }
    assert_eq!(d, DisplaySettings { time_range_s: 9.0, dist_range_um: 3000.0, auto_range: true });
    let step = operator_command(&CommandMsg::new(Opcode::StepDown, 35.0).unwrap(), &mut d);
    assert_eq!(step, Some(OperatorCommand::StepDown(35.0)));
}

#[test]
fn autonomous_session_streams_to_tcp_client() {
    let tcp = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = tcp.local_addr().unwrap().port();
    let client = thread::spawn(move || {
        let s = wire::connect(&Endpoint { host: "127.0.0.1".into(), port }).unwrap();
        let mut r = FrameReader::new(s);
        let mut frames = Vec::new();
        while let Some(d) = r.read_frame().unwrap() {
            assert!(d.gap.is_none());
            frames.push(d.frame);
        }
        frames
    });
    let opts = ServeOptions { wait_for_client: Some(Duration::from_millis(200)), max_ticks: Some(400), ..Default::default() };
    let summary = serve(TrialConfig::new(3), None, Some(tcp), None, &opts).unwrap();
    let frames = client.join().unwrap();

    let result = summary.result.expect("trial finished");
    assert!(result.reached_target);
    let scans = frames.iter().filter(|f| matches!(f.message, Message::MScan(_))).count();
    let traces: Vec<_> = frames.iter().filter_map(|f| match &f.message { Message::Trace(t) => Some((f.flags, *t)), _ => None }).collect();
    assert_eq!(scans as u64, summary.ticks);
    assert_eq!(traces.len() as u64, summary.ticks);
    // correction switches on at contact and stays on
    let first_corrected = traces.iter().position(|(fl, _)| fl & FLAG_CORRECTION != 0).unwrap();
    assert!(traces[first_corrected..].iter().all(|(fl, _)| fl & FLAG_CORRECTION != 0));
    assert!(traces.windows(2).all(|w| w[1].1.frame_seq > w[0].1.frame_seq));
    let Some(Message::Status(last)) = frames.iter().rev().map(|f| &f.message).find(|m| matches!(m, Message::Status(_))) else {
        panic!("no status")
    };
    assert_eq!(Phase::from_code(last.phase), Some(Phase::Idle));
}

#[test]
fn teleop_session_obeys_browser_commands() {
    let ws = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("ws://{}", ws.local_addr().unwrap());
    let mut cfg = TrialConfig::new(4);
    cfg.controller.mode = ArmMode::Teleop;
    let server = thread::spawn(move || {
        let opts = ServeOptions { max_ticks: Some(60), realtime: true, ..Default::default() };
        serve(cfg, None, None, Some(ws), &opts).unwrap()
    });
    let mut client = Client::connect(&url).unwrap();
    let send = |c: &mut Client, op, v| {
        c.send_raw(encode(&Frame::new(0, 0, Message::Command(CommandMsg::new(op, v).unwrap()))).unwrap()).unwrap()
    };
    send(&mut client, Opcode::SetTimeRange, 3.0);
    send(&mut client, Opcode::StepDown, 50.0);
    send(&mut client, Opcode::StepDown, 40.0);
    // manual steps outside the limits are refused by the encoder, so use a
    // controller-level refusal instead
    send(&mut client, Opcode::StartAuto, 0.0);
    send(&mut client, Opcode::Pause, 0.0);
    send(&mut client, Opcode::StepDown, 20.0);
    let mut rejected = false;
    let mut travel = 0.0f32;
    while let Some(bytes) = client.recv_raw().unwrap() {
        if let Ok((Frame { message: Message::Status(s), .. }, _)) = decode(&bytes) {
            rejected |= s.error_code == STATUS_REJECTED;
            travel = travel.max(s.travel_um);
        }
    }
    let summary = server.join().unwrap();
    assert_eq!(summary.commands_received, 6);
    assert_eq!(summary.display.time_range_s, 3.0);
    assert!(rejected, "step after StartAuto must be refused");
    assert!((travel - 90.0).abs() < 1.0, "travel {travel}");
}
