use serde::{Deserialize, Serialize};

use super::proof::verify_poi_cached;
use super::{ProofOfInclusion, SignedTreeRoot};
use crate::crypto::{
    hash, sign, tag, verify, Digest, Encoder, KeyPair, Signature, VerifyCache, VerifyKey, SIGNATURE_LEN,
};
use crate::id::{hex_bytes, ClientId};

/// A server-signed answer to a key lookup.
///
/// The signature covers the key, the epoch it was served in and the issue
/// time, so two responses for the same subject can be ordered and compared by
/// any third party. The root and proof ride alongside unsigned; the root
/// carries its own signature and is bound in by digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyResponse {
    pub subject: ClientId,
    #[serde(with = "hex_bytes")]
    pub public_key: Vec<u8>,
    pub upload_epoch: u64,
    pub epoch: u64,
    pub issued_at: u64,
    /// Uploaded this epoch; committed only by the next root.
    pub pending: bool,
    pub str: Option<SignedTreeRoot>,
    pub poi: Option<ProofOfInclusion>,
    pub signature: Signature,
}

impl KeyResponse {
    #[allow(clippy::too_many_arguments)]
    pub fn signing_message(
        subject: &ClientId,
        public_key: &[u8],
        upload_epoch: u64,
        epoch: u64,
        issued_at: u64,
        pending: bool,
        str: Option<&SignedTreeRoot>,
    ) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u8(tag::KEY_RESPONSE)
            .bytes(subject.as_str().as_bytes())
            .bytes(public_key)
            .u64(upload_epoch)
            .u64(epoch)
            .u64(issued_at)
            .u8(pending as u8)
            .digest(&str.map_or(Digest::ZERO, SignedTreeRoot::digest));
        e.finish()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new_signed(
        key: &KeyPair,
        subject: ClientId,
        public_key: Vec<u8>,
        upload_epoch: u64,
        epoch: u64,
        issued_at: u64,
        pending: bool,
        str: Option<SignedTreeRoot>,
        poi: Option<ProofOfInclusion>,
    ) -> Self {
        let msg = Self::signing_message(
            &subject,
            &public_key,
            upload_epoch,
            epoch,
            issued_at,
            pending,
            str.as_ref(),
        );
        KeyResponse {
            signature: sign(key, &msg),
            subject,
            public_key,
            upload_epoch,
            epoch,
            issued_at,
            pending,
            str,
            poi,
        }
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        Self::signing_message(
            &self.subject,
            &self.public_key,
            self.upload_epoch,
            self.epoch,
            self.issued_at,
            self.pending,
            self.str.as_ref(),
        )
    }

    /// Identifies the signed content; equal for re-deliveries of one response.
    pub fn digest(&self) -> Digest {
        let mut e = Encoder::new();
        e.bytes(&self.signed_bytes()).fixed(&self.signature.0);
        hash(tag::KEY_RESPONSE, e.as_slice())
    }

    pub fn verify(&self, server: &VerifyKey) -> bool {
        verify(server, &self.signed_bytes(), &self.signature)
    }

    pub fn verify_cached(&self, server: &VerifyKey, cache: &mut VerifyCache) -> bool {
        cache.verify(server, &self.signed_bytes(), &self.signature)
    }

    /// Signature valid, and (unless pending) the key is proven in the
    /// attached root.
    pub fn verify_with_inclusion(&self, server: &VerifyKey, cache: &mut VerifyCache) -> bool {
        if !self.verify_cached(server, cache) {
            return false;
        }
        if self.pending {
            return true;
        }
        match (&self.str, &self.poi) {
            (Some(s), Some(p)) => {
                s.epoch == self.epoch && verify_poi_cached(s, p, &self.subject, &self.public_key, server, cache)
            }
            _ => false,
        }
    }

    /// Bytes on the wire: signed fields, signature, and the proof if any.
    pub fn wire_bytes(&self) -> u64 {
        let fixed = 4 + self.subject.as_str().len() + 4 + self.public_key.len() + 8 * 3 + 1;
        let str_bytes = self.str.as_ref().map_or(0, |_| SignedTreeRoot::WIRE_BYTES);
        let poi_bytes = self.poi.as_ref().map_or(0, ProofOfInclusion::wire_bytes);
        fixed as u64 + SIGNATURE_LEN as u64 + str_bytes + poi_bytes
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.bytes(&self.signed_bytes()).fixed(&self.signature.0);
        match &self.str {
            Some(s) => e.u8(1).bytes(&s.encode()),
            None => e.u8(0),
        };
        match &self.poi {
            Some(p) => {
                e.u8(1);
                p.encode_into(&mut e);
            }
            None => {
                e.u8(0);
            }
        }
        e.finish()
    }
}
