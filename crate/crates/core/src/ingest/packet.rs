//! Ethernet II / IPv4 / UDP header parsing and construction.

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const IPPROTO_UDP: u8 = 17;
pub const ETH_HEADER_LEN: usize = 14;
pub const IPV4_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;

/// Header defect that makes a captured frame unusable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Malformed(pub &'static str);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ipv4Packet<'a> {
    pub src: u32,
    pub dst: u32,
    pub id: u16,
    pub protocol: u8,
    pub more_fragments: bool,
    /// Fragment offset in bytes.
    pub offset: usize,
    pub payload: &'a [u8],
}

impl Ipv4Packet<'_> {
    pub fn is_fragment(&self) -> bool {
        self.more_fragments || self.offset != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame<'a> {
    Ipv4(Ipv4Packet<'a>),
    /// Well-formed Ethernet frame carrying something other than IPv4.
    Other,
}

fn be16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

fn be32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

pub fn parse_frame(data: &[u8]) -> Result<Frame<'_>, Malformed> {
    if data.len() < ETH_HEADER_LEN {
        return Err(Malformed("short ethernet header"));
    }
    if be16(&data[12..14]) != ETHERTYPE_IPV4 {
        return Ok(Frame::Other);
    }
    let ip = &data[ETH_HEADER_LEN..];
    if ip.len() < IPV4_HEADER_LEN {
        return Err(Malformed("short ipv4 header"));
    }
    if ip[0] >> 4 != 4 {
        return Err(Malformed("ip version is not 4"));
    }
    let ihl = (ip[0] & 0x0F) as usize * 4;
    let total = be16(&ip[2..4]) as usize;
    if ihl < IPV4_HEADER_LEN || total < ihl || total > ip.len() {
        return Err(Malformed("inconsistent ipv4 lengths"));
    }
    let flags = be16(&ip[6..8]);
    Ok(Frame::Ipv4(Ipv4Packet {
        src: be32(&ip[12..16]),
        dst: be32(&ip[16..20]),
        id: be16(&ip[4..6]),
        protocol: ip[9],
        more_fragments: flags & 0x2000 != 0,
        offset: (flags & 0x1FFF) as usize * 8,
        // Anything past total length is link-layer padding.
        payload: &ip[ihl..total],
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UdpHeader {
    pub src_port: u16,
    pub dst_port: u16,
}

pub fn parse_udp(segment: &[u8]) -> Result<(UdpHeader, &[u8]), Malformed> {
    if segment.len() < UDP_HEADER_LEN {
        return Err(Malformed("short udp header"));
    }
    let len = be16(&segment[4..6]) as usize;
    if len < UDP_HEADER_LEN || len > segment.len() {
        return Err(Malformed("inconsistent udp length"));
    }
    Ok((
        UdpHeader {
            src_port: be16(&segment[0..2]),
            dst_port: be16(&segment[2..4]),
        },
        &segment[UDP_HEADER_LEN..len],
    ))
}

fn checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header.chunks(2).map(|c| be16(c) as u32).sum();
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

/// UDP header plus payload. The checksum is left at zero ("not computed").
pub fn build_udp(src_port: u16, dst_port: u16, payload: &[u8]) -> Vec<u8> {
    let mut seg = Vec::with_capacity(UDP_HEADER_LEN + payload.len());
    seg.extend_from_slice(&src_port.to_be_bytes());
    seg.extend_from_slice(&dst_port.to_be_bytes());
    seg.extend_from_slice(&((UDP_HEADER_LEN + payload.len()) as u16).to_be_bytes());
    seg.extend_from_slice(&[0, 0]);
    seg.extend_from_slice(payload);
    seg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IpFields {
    pub src: u32,
    pub dst: u32,
    pub id: u16,
    pub protocol: u8,
}

/// Ethernet frame carrying one IPv4 packet (or fragment) with `body` as its payload.
pub fn build_ipv4_frame(ip: IpFields, more_fragments: bool, offset: usize, body: &[u8]) -> Vec<u8> {
    debug_assert!(offset % 8 == 0);
    let mut f = Vec::with_capacity(ETH_HEADER_LEN + IPV4_HEADER_LEN + body.len());
    f.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01, 0x02, 0, 0, 0, 0, 0x02]);
    f.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    let mut h = [0u8; IPV4_HEADER_LEN];
    h[0] = 0x45;
    h[2..4].copy_from_slice(&((IPV4_HEADER_LEN + body.len()) as u16).to_be_bytes());
    h[4..6].copy_from_slice(&ip.id.to_be_bytes());
    let flags = ((offset / 8) as u16) | if more_fragments { 0x2000 } else { 0 };
    h[6..8].copy_from_slice(&flags.to_be_bytes());
    h[8] = 64;
    h[9] = ip.protocol;
    h[12..16].copy_from_slice(&ip.src.to_be_bytes());
    h[16..20].copy_from_slice(&ip.dst.to_be_bytes());
    let sum = checksum(&h);
    h[10..12].copy_from_slice(&sum.to_be_bytes());
    f.extend_from_slice(&h);
    f.extend_from_slice(body);
    f
}

/// Splits `body` into fragment frames whose data sizes are multiples of 8
/// (except the last). `cut_points` are byte offsets, each rounded down to
/// a multiple of 8; empty pieces are skipped.
pub fn build_fragments(ip: IpFields, body: &[u8], cut_points: &[usize]) -> Vec<Vec<u8>> {
    let mut cuts: Vec<usize> = cut_points
        .iter()
        .map(|c| c / 8 * 8)
        .filter(|&c| c > 0 && c < body.len())
        .collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut frames = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for end in cuts.into_iter().chain(std::iter::once(body.len())) {
        let more = end < body.len();
        frames.push(build_ipv4_frame(ip, more, start, &body[start..end]));
        start = end;
    }
    frames
}

#[cfg(test)]
mod tests {
    use super::*;

    const IP: IpFields = IpFields {
        src: 0x0A00_0001,
        dst: 0xC0A8_0001,
        id: 77,
        protocol: IPPROTO_UDP,
    };

    #[test]
    fn udp_frame_round_trip() {
        let seg = build_udp(5000, 4661, b"hello");
        let frame = build_ipv4_frame(IP, false, 0, &seg);
        let Frame::Ipv4(p) = parse_frame(&frame).unwrap() else {
            panic!()
        };
        assert_eq!((p.src, p.dst, p.id, p.protocol), (IP.src, IP.dst, 77, 17));
        assert!(!p.is_fragment());
        let (h, payload) = parse_udp(p.payload).unwrap();
        assert_eq!((h.src_port, h.dst_port), (5000, 4661));
        assert_eq!(payload, b"hello");
    }

    #[test]
    fn header_checksum_verifies() {
        let frame = build_ipv4_frame(IP, false, 0, &[0; 4]);
        assert_eq!(checksum(&frame[14..34]), 0);
    }

    #[test]
    fn ethernet_padding_is_ignored() {
        let mut frame = build_ipv4_frame(IP, false, 0, &build_udp(1, 2, b"x"));
        frame.extend_from_slice(&[0; 20]);
        let Frame::Ipv4(p) = parse_frame(&frame).unwrap() else {
            panic!()
        };
        assert_eq!(parse_udp(p.payload).unwrap().1, b"x");
    }

    #[test]
    fn malformed_headers() {
        assert!(parse_frame(&[0; 10]).is_err());
        let mut frame = build_ipv4_frame(IP, false, 0, &[0; 8]);
        frame[14] = 0x65;
        assert!(parse_frame(&frame).is_err());
        let mut frame = build_ipv4_frame(IP, false, 0, &[0; 8]);
        frame[16..18].copy_from_slice(&500u16.to_be_bytes());
        assert!(parse_frame(&frame).is_err());
        assert!(parse_udp(&[0, 1, 0, 2, 0, 40, 0, 0]).is_err());
    }

    #[test]
    fn non_ipv4_is_other() {
        let mut frame = vec![0u8; 60];
        frame[12..14].copy_from_slice(&0x86DDu16.to_be_bytes());
        assert_eq!(parse_frame(&frame), Ok(Frame::Other));
    }

    #[test]
    fn fragments_cover_body() {
        let body: Vec<u8> = (0..100).collect();
        let frames = build_fragments(IP, &body, &[45, 13]);
        assert_eq!(frames.len(), 3);
        let mut rebuilt = vec![0u8; body.len()];
        for (i, f) in frames.iter().enumerate() {
            let Frame::Ipv4(p) = parse_frame(f).unwrap() else {
                panic!()
            };
            assert_eq!(p.more_fragments, i < 2);
            rebuilt[p.offset..p.offset + p.payload.len()].copy_from_slice(p.payload);
        }
        assert_eq!(rebuilt, body);
    }
}
