use std::net::SocketAddr;

use thiserror::Error;
use url::Url;

use super::link::DEFAULT_PORT;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UriError {
    #[error("invalid URI {0:?}")]
    Invalid(String),
    #[error("unsupported scheme {0:?}")]
    UnsupportedScheme(String),
    #[error("cannot resolve host {0:?}")]
    Unresolved(String),
}

/// A parsed `coap://host[:port][/path]` URI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoapUri {
    pub host: String,
    pub port: u16,
    pub path: String,
}

impl CoapUri {
    pub fn parse(text: &str) -> Result<CoapUri, UriError> {
        let url = Url::parse(text).map_err(|_| UriError::Invalid(text.to_string()))?;
        if url.scheme() != "coap" {
            return Err(UriError::UnsupportedScheme(url.scheme().to_string()));
        }
        let host = url
            .host_str()
            .filter(|h| !h.is_empty())
            .ok_or_else(|| UriError::Invalid(text.to_string()))?
            .trim_start_matches('[')
            .trim_end_matches(']')
            .to_string();
        let path = match url.path() {
            "" => "/".to_string(),
            p => p.to_string(),
        };
        Ok(CoapUri {
            host,
            port: url.port().unwrap_or(DEFAULT_PORT),
            path,
        })
    }

    /// Literal socket address, without name resolution.
    pub fn socket_addr(&self) -> Option<SocketAddr> {
        format!("{}:{}", self.host, self.port)
            .parse()
            .ok()
            .or_else(|| format!("[{}]:{}", self.host, self.port).parse().ok())
    }

    pub async fn resolve(&self) -> Result<SocketAddr, UriError> {
        if let Some(addr) = self.socket_addr() {
            return Ok(addr);
        }
        tokio::net::lookup_host((self.host.as_str(), self.port))
            .await
            .ok()
            .and_then(|mut it| it.next())
            .ok_or_else(|| UriError::Unresolved(self.host.clone()))
    }
}

pub fn coap_uri(addr: SocketAddr, path: &str) -> String {
    format!("coap://{addr}{path}")
}
