//! Kept apart from the service tests: the socket opened here would show up
//! in their recordings, since every test in a binary shares the process.

use std::time::Duration;

use dermachat_serve::guard::{process_sockets, ConnectionRecorder, Target};

#[test]
fn recorder_names_a_non_loopback_peer() {
    let recorder = ConnectionRecorder::start(Target::SelfProcess, Duration::from_millis(1)).unwrap();
    // Connecting a UDP socket only sets its peer; nothing is sent.
    let sock = std::net::UdpSocket::bind("0.0.0.0:0").unwrap();
    sock.connect("10.255.255.1:9").unwrap();
    assert!(process_sockets(Target::SelfProcess).unwrap().iter().any(|e| e.is_outbound()));
    let report = recorder.finish();
    drop(sock);
    assert!(!report.passed());
    assert!(report.violations().iter().any(|v| v.contains("10.255.255.1:9")), "{:?}", report.violations());
}
