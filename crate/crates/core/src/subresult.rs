use crate::error::{Error, Result};

/// An L-byte XOR accumulator: a tasklet partial, a DPU subresult or a
/// server's answer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Subresult(Vec<u8>);

impl Subresult {
    pub fn new(value: Vec<u8>) -> Self {
        Subresult(value)
    }

    pub fn zero(record_len: usize) -> Self {
        Subresult(vec![0; record_len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }

    pub fn xor_assign(&mut self, other: &Subresult) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Domain(format!(
                "cannot combine subresults of {} and {} bytes",
                self.len(),
                other.len()
            )));
        }
        crate::database::xor_into(&mut self.0, &other.0);
        Ok(())
    }

    pub fn xor(&self, other: &Subresult) -> Result<Subresult> {
        let mut out = self.clone();
        out.xor_assign(other)?;
        Ok(out)
    }
}

impl From<Vec<u8>> for Subresult {
    fn from(v: Vec<u8>) -> Self {
        Subresult(v)
    }
}
