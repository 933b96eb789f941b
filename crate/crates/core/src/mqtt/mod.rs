//! MQTT 3.1.1 subset: codec, topic matching, broker logic and persistent
//! session storage.

pub mod broker;
pub mod codec;
pub mod persist;
pub mod topic;

pub use broker::{Broker, BrokerError, ConnKey, Delivery};
pub use codec::{frame_len, mqtt_parse_args, valid_mqtt_header, CodecError, Kind, MqttMessage};
pub use persist::{DirStore, MemoryStore, SessionStore};
pub use topic::{matches, valid_filter, valid_topic, TopicTable};
