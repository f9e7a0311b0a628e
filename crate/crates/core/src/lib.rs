//! Emulation of a SIM-card hosted TPM: the APDU wire protocol, a TPM command
//! engine, pairing-based direct anonymous attestation, a bootloader chain
//! simulator and the protocols binding the card to the device's root of
//! trust for measurement.

pub mod apdu;
pub mod binding;
pub mod boot;
pub mod cert;
pub mod codec;
pub mod daa;
pub mod groups;
pub mod homenc;
pub mod tpm;
