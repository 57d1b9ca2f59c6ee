//! Decoding, anonymisation and analysis of eDonkey server UDP traffic.
//!
//! The pipeline reads a pcap capture ([`ingest`]), decodes each datagram
//! into an eDonkey message ([`wire`]), anonymises it ([`anonymize`]) and
//! writes an XML trace ([`trace`]). [`analyze`] computes the file and client
//! distributions from a trace; [`generate`] synthesises captures with known
//! ground truth and [`verify`] checks a pipeline run against it.

pub mod analyze;
pub mod anonymize;
pub mod generate;
pub mod ingest;
pub mod pipeline;
pub mod trace;
pub mod verify;
pub mod wire;
