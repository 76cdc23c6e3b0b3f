use std::io::{self, Read, Write};
use std::net::{Ipv4Addr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;

use super::frame::{Frame, HEADER_LEN};
use crate::error::Result;

/// One direction of a channel carried over a loopback TCP connection.
///
/// Writes go through a dedicated thread so the emulation loop never blocks
/// on a full socket buffer; reads happen when the frame is due.
pub(crate) struct HostPipe {
    writer: mpsc::Sender<Vec<u8>>,
    reader: TcpStream,
}

impl HostPipe {
    pub(crate) fn new() -> io::Result<HostPipe> {
        let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, 0))?;
        let mut out = TcpStream::connect(listener.local_addr()?)?;
        let (reader, _) = listener.accept()?;
        out.set_nodelay(true)?;
        reader.set_nodelay(true)?;
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        thread::Builder::new()
            .name("splitnet-pipe".into())
            .spawn(move || {
                for buf in rx {
                    if out.write_all(&buf).is_err() {
                        break;
                    }
                }
            })?;
        Ok(HostPipe { writer: tx, reader })
    }

    pub(crate) fn push(&self, frame: &Frame) {
        // The writer thread only exits once the reader side is gone.
        let _ = self.writer.send(frame.encode());
    }

    pub(crate) fn pull(&mut self) -> Result<Frame> {
        let mut header = [0u8; HEADER_LEN];
        self.reader.read_exact(&mut header)?;
        let (mut frame, len) = Frame::decode_header(&header)?;
        let mut payload = vec![0u8; len];
        self.reader.read_exact(&mut payload)?;
        frame.payload = payload;
        Ok(frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interconnect::{ComponentId, Op};

    #[test]
    fn frames_cross_a_real_socket_in_order() {
        let mut pipe = HostPipe::new().unwrap();
        let frames: Vec<Frame> = (0..20)
            .map(|i| {
                Frame::request(
                    Op::PING,
                    i,
                    ComponentId::p(0),
                    ComponentId::n(0),
                    vec![i as u8; i as usize * 100],
                )
            })
            .collect();
        for f in &frames {
            pipe.push(f);
        }
        for f in &frames {
            assert_eq!(&pipe.pull().unwrap(), f);
        }
    }
}
