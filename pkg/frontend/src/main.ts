/** Browser entry point. */

import { createApp } from "./app.js";
import { resolveGatewayUrl } from "./wire.js";

const DEFAULT_GATEWAY = "http://127.0.0.1:8800";

const root = document.getElementById("app");
if (root) {
  const url = resolveGatewayUrl(window.location.search, DEFAULT_GATEWAY);
  const app = createApp(root, { gatewayUrl: url });
  void app.init();
}
