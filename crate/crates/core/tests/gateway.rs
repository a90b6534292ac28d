use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use autodalk::gateway::{self, Client};
use autodalk::wire::{decode, encode, CommandMsg, Frame, Message, Opcode, StatusMsg};

fn status(seq: u32) -> Frame {
    Frame::new(seq, 0, Message::Status(StatusMsg { phase: 3, travel_um: seq as f32, error_code: 0, error_text: "ok".into() }))
}

#[test]
fn websocket_messages_are_protocol_frames() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("ws://{}", listener.local_addr().unwrap());
    let (out_tx, out_rx) = mpsc::channel::<Vec<u8>>();
    let (in_tx, in_rx) = mpsc::channel::<Frame>();
    let server = thread::spawn(move || gateway::serve_one(&listener, &out_rx, &in_tx).unwrap());

    let mut client = Client::connect(&url).unwrap();
    for i in 0..10 {
        out_tx.send(encode(&status(i)).unwrap()).unwrap();
    }
    for i in 0..10 {
        let bytes = client.recv_raw().unwrap().unwrap();
        // byte-identical to the TCP encoding
        assert_eq!(bytes, encode(&status(i)).unwrap());
        let (f, used) = decode(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(f, status(i));
    }

    let cmd = Frame::new(0, 5, Message::Command(CommandMsg::new(Opcode::SetStep, 20.0).unwrap()));
    // garbage and a frame with trailing bytes are dropped, not forwarded
    client.send_raw(vec![1, 2, 3]).unwrap();
    let mut padded = encode(&cmd).unwrap();
    padded.push(0);
    client.send_raw(padded).unwrap();
    client.send_raw(encode(&cmd).unwrap()).unwrap();
    assert_eq!(in_rx.recv().unwrap(), cmd);

    drop(out_tx);
    assert_eq!(client.recv_raw().unwrap(), None);
    let stats = server.join().unwrap();
    assert_eq!(stats.sent, 10);
    assert_eq!(stats.received, 1);
    assert_eq!(stats.rejected, 2);
    assert!(stats.closed_by_server);
    assert!(in_rx.try_recv().is_err());
}

#[test]
fn run_serves_clients_in_turn() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("ws://{}", listener.local_addr().unwrap());
    let (out_tx, out_rx) = mpsc::channel::<Vec<u8>>();
    let (in_tx, in_rx) = mpsc::channel::<Frame>();
    let server = thread::spawn(move || gateway::run(listener, out_rx, in_tx).unwrap());

    for round in 0..2u32 {
        let mut client = Client::connect(&url).unwrap();
        let cmd = Frame::new(round, 0, Message::Command(CommandMsg::new(Opcode::Pause, 0.0).unwrap()));
        client.send_raw(encode(&cmd).unwrap()).unwrap();
        // the command proves the bridge is attached before frames are sent
        assert_eq!(in_rx.recv().unwrap(), cmd);
        out_tx.send(encode(&status(round)).unwrap()).unwrap();
        assert_eq!(client.recv_raw().unwrap().unwrap(), encode(&status(round)).unwrap());
        client.close().unwrap();
    }
    drop(out_tx);
    let total = server.join().unwrap();
    assert_eq!(total.received, 2);
    assert!(total.sent >= 2);
}
