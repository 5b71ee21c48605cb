#pragma once

// Checkpoint container (little-endian):
//   "HFDK" | u32 version | u64 n | n bytes config echo (key=value text)
//   | u64 schedule hash | u64 step | u64 parameter count P
//   | P f64 params | P f64 ema | P f64 adam_m | P f64 adam_v

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "hfd/core/error.hpp"
#include "hfd/core/kv.hpp"
#include "hfd/core/random.hpp"
#include "hfd/trainer.hpp"

namespace hfd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t schedule_hash(const NoiseSchedule& s) {
  return fnv1a64("eta=" + KeyValues::format_double(s.eta) + ";logsnr_min=" + KeyValues::format_double(s.logsnr_min) +
                 ";logsnr_max=" + KeyValues::format_double(s.logsnr_max));
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline KeyValues config_echo(const nn::NetConfig& n, const TrainConfig& t) {
  KeyValues kv;
  kv.set("loss", to_string(t.loss));
  kv.set("in_channels", n.in_channels);
  kv.set("ctx_channels", n.ctx_channels);
  kv.set("out_channels", n.out_channels);
  kv.set("channels", join_ints(n.channels));
  kv.set("blocks", join_ints(n.blocks));
  kv.set("emb_dim", n.emb_dim);
  kv.set("attention", n.attention);
  kv.set("zero_init_output", n.zero_init_output);
  kv.set("time_input", std::string(n.time_input == nn::TimeInput::log_snr ? "log_snr" : "linear"));
  kv.set("eta", n.sched.eta);
  kv.set("logsnr_min", n.sched.logsnr_min);
  kv.set("logsnr_max", n.sched.logsnr_max);
  kv.set("init_seed", static_cast<long long>(n.init_seed));
  kv.set("lr", t.lr);
  kv.set("beta1", t.beta1);
  kv.set("beta2", t.beta2);
  kv.set("adam_eps", t.adam_eps);
  kv.set("warmup", t.warmup);
  kv.set("halflife", t.halflife);
  kv.set("ema_decay", t.ema_decay);
  kv.set("dequant_amplitude", t.dequant_amplitude);
  return kv;
}

inline void parse_config_echo(const KeyValues& kv, nn::NetConfig& n, TrainConfig& t) {
  t.loss = parse_loss_kind(kv.str("loss"));
  n.in_channels = static_cast<int>(kv.integer("in_channels"));
  n.ctx_channels = static_cast<int>(kv.integer("ctx_channels"));
  n.out_channels = static_cast<int>(kv.integer("out_channels"));
  n.channels = kv.int_list("channels");
  n.blocks = kv.int_list("blocks");
  n.emb_dim = static_cast<int>(kv.integer("emb_dim"));
  n.attention = kv.flag("attention");
  n.zero_init_output = kv.flag("zero_init_output");
  const auto& ti = kv.str("time_input");
  if (ti != "log_snr" && ti != "linear") throw DataError("checkpoint: bad time_input '" + ti + "'");
  n.time_input = ti == "log_snr" ? nn::TimeInput::log_snr : nn::TimeInput::linear;
  n.sched.eta = kv.num("eta");
  n.sched.logsnr_min = kv.num("logsnr_min");
  n.sched.logsnr_max = kv.num("logsnr_max");
  n.init_seed = static_cast<std::uint64_t>(kv.integer("init_seed"));
  t.lr = kv.num("lr");
  t.beta1 = kv.num("beta1");
  t.beta2 = kv.num("beta2");
  t.adam_eps = kv.num("adam_eps");
  t.warmup = kv.num("warmup");
  t.halflife = kv.num("halflife");
  t.ema_decay = kv.num("ema_decay");
  t.dequant_amplitude = kv.num("dequant_amplitude");
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f64s(std::string& out, const std::vector<double>& v) {
  for (double d : v) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

class Reader {
 public:
  Reader(const std::string& data, std::string what) : d_(data), what_(std::move(what)) {}
  void need(std::size_t n) const {
    if (d_.size() - pos_ < n) throw DataError(what_ + ": truncated");
  }
  std::uint64_t uint(int bytes) {
    need(bytes);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(d_[pos_ + i])) << (8 * i);
    pos_ += bytes;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> f64s(std::size_t n) {
    if (n > (d_.size() - pos_) / 8) throw DataError(what_ + ": truncated");
    std::vector<double> v(n);
    for (auto& x : v) x = std::bit_cast<double>(uint(8));
    return v;
  }
  bool done() const { return pos_ == d_.size(); }

 private:
  const std::string& d_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& p, const std::string& what) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DataError(what + ": cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void write_file(const std::filesystem::path& p, const std::string& data, const std::string& what) {
  if (p.has_parent_path() && !std::filesystem::is_directory(p.parent_path()))
    throw DataError(what + ": directory does not exist: " + p.parent_path().string());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw DataError(what + ": cannot write " + p.string());
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f) throw DataError(what + ": write failed " + p.string());
}

}  // namespace detail

inline std::string serialize_checkpoint(const TrainState& st) {
  std::string out = "HFDK";
  detail::put_u32(out, kCheckpointVersion);
  const std::string echo = config_echo(st.net.config(), st.cfg).to_text();
  detail::put_u64(out, echo.size());
  out += echo;
  detail::put_u64(out, schedule_hash(st.net.config().sched));
  detail::put_u64(out, st.step);
  detail::put_u64(out, st.net.parameter_count());
  detail::put_f64s(out, st.net.params());
  detail::put_f64s(out, st.ema);
  detail::put_f64s(out, st.adam_m);
  detail::put_f64s(out, st.adam_v);
  return out;
}

inline TrainState deserialize_checkpoint(const std::string& data) {
  detail::Reader r(data, "checkpoint");
  if (r.bytes(4) != "HFDK") throw DataError("checkpoint: bad magic");
  const auto version = r.uint(4);
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto echo_len = r.uint(8);
  r.need(echo_len);
  const KeyValues kv = KeyValues::parse(r.bytes(echo_len), "checkpoint config");
  nn::NetConfig ncfg;
  TrainConfig tcfg;
  parse_config_echo(kv, ncfg, tcfg);
  const auto hash = r.uint(8);
  if (hash != schedule_hash(ncfg.sched)) throw DataError("checkpoint: schedule hash does not match the config echo");
  const auto step = r.uint(8);
  const auto count = r.uint(8);
  TrainState st = [&] {
    try {
      return TrainState(nn::TinyCondNet(ncfg), tcfg);
    } catch (const std::invalid_argument& e) {
      throw DataError(std::string("checkpoint: invalid config: ") + e.what());
    }
  }();
  if (count != st.net.parameter_count())
    throw DataError("checkpoint: parameter count " + std::to_string(count) + " does not match the architecture (" +
                    std::to_string(st.net.parameter_count()) + ")");
  st.step = step;
  st.net.params() = r.f64s(count);
  st.ema = r.f64s(count);
  st.adam_m = r.f64s(count);
  st.adam_v = r.f64s(count);
  if (!r.done()) throw DataError("checkpoint: trailing bytes");
  for (const auto* v : {&st.net.params(), &st.ema})
    for (double x : *v)
      if (!std::isfinite(x)) throw DataError("checkpoint: non-finite parameter");
  return st;
}

inline void save_checkpoint(const TrainState& st, const std::filesystem::path& p) {
  detail::write_file(p, serialize_checkpoint(st), "checkpoint");
}

inline TrainState load_checkpoint(const std::filesystem::path& p) {
  return deserialize_checkpoint(detail::read_file(p, "checkpoint"));
}

}  // namespace hfd
