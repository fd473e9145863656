#include "pvess/neural.hpp"

#include <cstdio>
#include <istream>
#include <ostream>
#include <string>

namespace pvess {

namespace {

void expect_token(std::istream& in, const std::string& token) {
  std::string got;
  if (!(in >> got) || got != token) {
    throw ValidationError("checkpoint: expected '" + token + "', found '" + got + "'");
  }
}

}  // namespace

void write_net(std::ostream& out, const Net& net) {
  out << "pvess-net 1\n";
  out << "widths " << net.widths().size();
  for (int w : net.widths()) out << ' ' << w;
  out << "\noutput " << (net.output_activation() == Activation::kTanh ? "tanh" : "linear") << '\n';
  out << "params " << net.parameter_count() << '\n';
  char buf[40];
  for (Eigen::Index i = 0; i < net.parameter_count(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g\n", net.params()[i]);
    out << buf;
  }
}

Net read_net(std::istream& in) {
  expect_token(in, "pvess-net");
  int version = 0;
  if (!(in >> version) || version != 1) throw ValidationError("checkpoint: unsupported version");
  expect_token(in, "widths");
  std::size_t n = 0;
  if (!(in >> n) || n < 2 || n > 64) throw ValidationError("checkpoint: bad layer count");
  std::vector<int> widths(n);
  for (auto& w : widths) {
    if (!(in >> w) || w <= 0) throw ValidationError("checkpoint: bad width");
  }
  expect_token(in, "output");
  std::string act;
  in >> act;
  if (act != "tanh" && act != "linear") throw ValidationError("checkpoint: bad output activation");
  Net net(widths, act == "tanh" ? Activation::kTanh : Activation::kLinear);
  expect_token(in, "params");
  Eigen::Index count = 0;
  if (!(in >> count) || count != net.parameter_count()) {
    throw ValidationError("checkpoint: parameter count does not match widths");
  }
  Net::Vector p(count);
  for (Eigen::Index i = 0; i < count; ++i) {
    std::string tok;
    if (!(in >> tok)) throw ValidationError("checkpoint: truncated parameter list");
    p[i] = std::stod(tok);
  }
  net.set_params(p);
  return net;
}

}  // namespace pvess
